"""Frame-by-frame lip-sync of a source video to a target audio track.

Face localisation is pluggable. ``fixed`` uses one user-supplied box for every
frame; ``exec:PATH`` runs an external detector as ``PATH FRAMES.clip`` and
reads one ``frame_index x y w h conf`` line per detection from its stdout
(UTF-8, LF). When several boxes share a frame the most confident one wins.
"""
from __future__ import annotations

import subprocess
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .checkpoint import load_checkpoint
from .corpus import extract_mel, frame_audio_windows, mask_lower_half
from .exceptions import ConfigMismatch, FrameSkipped, MediaError
from .generator import GENERATOR_KIND, generate_frames, generator_configs, generator_module
from .media import read_audio, read_video, write_frames_container, write_video

SMOOTH_TAPS = 5
DEFAULT_PADS = (0, 10, 0, 0)


@dataclass(frozen=True)
class FaceBox:
    frame_index: int
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ConfigMismatch(f"face box needs positive size, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ConfigMismatch("face box must start inside the frame")
        if not 0.0 <= self.confidence <= 1.0:
            raise ConfigMismatch("confidence must lie in [0, 1]")

    def fits(self, height: int, width: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height


@dataclass
class InferenceJob:
    video_path: str
    audio_path: str
    checkpoint_path: str
    output_path: str
    detector: str = "fixed"
    box: tuple | None = None
    pads: tuple = DEFAULT_PADS
    smoothing: bool = True
    loop_video: bool = False

    def __post_init__(self):
        if self.detector != "fixed" and not self.detector.startswith("exec:"):
            raise ConfigMismatch(f"detector must be 'fixed' or 'exec:PATH', got {self.detector!r}")
        if self.detector == "fixed" and self.box is None:
            raise ConfigMismatch("the fixed detector needs a box (x, y, w, h)")
        if len(self.pads) != 4 or any(p < 0 for p in self.pads):
            raise ConfigMismatch("pads must be four non-negative integers (top, bottom, left, right)")


# --------------------------------------------------------------------------- detection

def parse_detections(text: str, n_frames: int, height: int, width: int) -> list[FaceBox | None]:
    """Best box per frame from adapter output; frames without a usable line get ``None``."""
    best: list[FaceBox | None] = [None] * n_frames
    for n, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise MediaError(f"detector line {n}: expected 'frame_index x y w h conf', got {line!r}")
        try:
            idx, x, y, w, h = (int(round(float(v))) for v in parts[:5])
            conf = float(parts[5])
        except ValueError as exc:
            raise MediaError(f"detector line {n}: {exc}") from exc
        if not 0 <= idx < n_frames:
            continue
        x0, y0 = max(x, 0), max(y, 0)
        w, h = min(x + w, width) - x0, min(y + h, height) - y0
        if w <= 0 or h <= 0:
            continue
        box = FaceBox(idx, x0, y0, w, h, min(max(conf, 0.0), 1.0))
        if best[idx] is None or box.confidence > best[idx].confidence:
            best[idx] = box
    return best


def _run_detector(exe: str, frames: np.ndarray) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "frames.clip"
        write_frames_container(path, frames, 25.0)
        try:
            proc = subprocess.run([exe, str(path)], capture_output=True)
        except OSError as exc:
            raise MediaError(f"cannot run detector {exe}: {exc}") from exc
    if proc.returncode != 0:
        raise MediaError(f"detector {exe} exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[-300:]}")
    return proc.stdout.decode("utf-8")


def smooth_boxes(boxes: list[FaceBox | None], taps: int = SMOOTH_TAPS) -> list[FaceBox | None]:
    """Centred moving average of box coordinates, truncated at the edges; gaps are left alone."""
    idx = [i for i, b in enumerate(boxes) if b is not None]
    if not idx:
        return list(boxes)
    coords = np.array([[boxes[i].x, boxes[i].y, boxes[i].w, boxes[i].h] for i in idx], dtype=np.float64)
    half = taps // 2
    out = list(boxes)
    for k, i in enumerate(idx):
        lo, hi = max(0, k - half), min(len(idx), k + half + 1)
        x, y, w, h = np.round(coords[lo:hi].mean(axis=0)).astype(int)
        b = boxes[i]
        out[i] = FaceBox(b.frame_index, int(x), int(y), int(w), int(h), b.confidence)
    return out


def localize_faces(frames, detector: str = "fixed", box=None, smoothing: bool = True) -> list[FaceBox | None]:
    """One box per frame (``None`` where no face was found, with a :class:`FrameSkipped` warning)."""
    frames = np.asarray(frames)
    n, height, width = frames.shape[:3]
    if detector == "fixed":
        if box is None:
            raise ConfigMismatch("the fixed detector needs a box (x, y, w, h)")
        x, y, w, h = (int(v) for v in box)
        b = FaceBox(0, x, y, w, h)
        if not b.fits(height, width):
            raise ConfigMismatch(f"box {tuple(box)} exceeds the {width}x{height} frame")
        boxes = [FaceBox(i, x, y, w, h) for i in range(n)]
    elif detector.startswith("exec:"):
        boxes = parse_detections(_run_detector(detector[5:], frames), n, height, width)
    else:
        raise ConfigMismatch(f"unknown detector {detector!r}")
    for i, b in enumerate(boxes):
        if b is None:
            warnings.warn(f"no face in frame {i}; passing it through", FrameSkipped, stacklevel=2)
    return smooth_boxes(boxes) if smoothing else boxes


def pad_box(box: FaceBox, pads, height: int, width: int) -> FaceBox:
    top, bottom, left, right = pads
    x0, y0 = max(box.x - left, 0), max(box.y - top, 0)
    x1, y1 = min(box.x + box.w + right, width), min(box.y + box.h + bottom, height)
    return FaceBox(box.frame_index, x0, y0, x1 - x0, y1 - y0, box.confidence)


# --------------------------------------------------------------------------- synthesis

def _frame_schedule(n_video: int, n_audio_frames: int, loop: bool) -> np.ndarray:
    if loop and n_audio_frames > n_video:
        return np.arange(n_audio_frames) % n_video
    return np.arange(min(n_video, n_audio_frames))


def lipsync_frames(gen_params, frames, waveform, boxes, pads=DEFAULT_PADS, loop_video: bool = False,
                   net=None) -> np.ndarray:
    """Lip-sync uint8 frames to ``waveform``; only the padded face rectangles are rewritten."""
    _, window = generator_configs(gen_params)
    frames = np.asarray(frames)
    if frames.dtype != np.uint8 or frames.ndim != 4 or frames.shape[-1] != 3:
        raise MediaError(f"frames must be uint8 (n, H, W, 3), got {frames.dtype} {frames.shape}")
    mel = extract_mel(waveform, window.sample_rate, window)
    n_audio = int(np.floor(len(waveform) / window.samples_per_frame))
    order = _frame_schedule(len(frames), n_audio, loop_video)
    out = frames[order].copy()
    if len(order) == 0:
        return out
    audio = frame_audio_windows(mel, len(order), window)
    height, width = frames.shape[1:3]
    net = net or generator_module(gen_params)
    crops, rects, rows = [], [], []
    for j, src in enumerate(order):
        b = boxes[src]
        if b is None:
            continue
        r = pad_box(b, pads, height, width)
        crop = frames[src, r.y:r.y + r.h, r.x:r.x + r.w]
        crops.append(cv2.resize(crop, (window.W, window.H), interpolation=cv2.INTER_AREA).astype(np.float32) / 255.0)
        rects.append(r)
        rows.append(j)
    if not rows:
        return out
    crops = np.stack(crops)
    faces = generate_frames(gen_params, crops, mask_lower_half(crops), audio[rows], net=net)
    faces = (np.clip(faces, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    for j, r, face in zip(rows, rects, faces):
        out[j, r.y:r.y + r.h, r.x:r.x + r.w] = cv2.resize(face, (r.w, r.h), interpolation=cv2.INTER_LINEAR).reshape(r.h, r.w, 3)
    return out


def load_generator(checkpoint_path):
    params, _ = load_checkpoint(checkpoint_path, expect_kind=GENERATOR_KIND)
    return params


def lipsync_video(job: InferenceJob) -> dict:
    """Run the job end to end and write ``job.output_path``; returns a small summary."""
    gen = load_generator(job.checkpoint_path)
    _, window = generator_configs(gen)
    frames, fps = read_video(job.video_path)
    if len(frames) == 0:
        raise MediaError(f"{job.video_path}: no frames")
    if abs(fps - window.fps) > 1e-6:
        raise ConfigMismatch(f"video runs at {fps} fps but the checkpoint expects {window.fps} fps")
    waveform = read_audio(job.audio_path, window.sample_rate)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FrameSkipped)
        boxes = localize_faces(frames, job.detector, job.box, job.smoothing)
    skipped = sum(issubclass(w.category, FrameSkipped) for w in caught)
    for w in caught:
        warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    out = lipsync_frames(gen, frames, waveform, boxes, job.pads, job.loop_video)
    write_video(job.output_path, out, fps, job.audio_path)
    return {"frames": int(len(out)), "fps": float(fps), "skipped": int(skipped)}
