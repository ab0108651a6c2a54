"""Media input/output.

Two kinds of files are handled natively, without any external tool:

* ``.wav``  PCM audio (8/16/32-bit integer), via the standard ``wave`` module.
* ``.clip`` a named-array container (see :mod:`synclip.container`) holding
  ``frames`` (uint8, ``(n, H, W, 3)`` RGB) with ``meta["fps"]``; an output clip
  may also carry ``audio`` (uint8 bytes of the muxed audio file, verbatim) and
  ``meta["audio_name"]``.

Everything else is delegated to an external transcoder (ffmpeg-compatible),
located via ``$SYNCLIP_FFMPEG``, then ``ffmpeg`` on ``PATH``, then the
``imageio-ffmpeg`` binary if that package is installed. Argument contract:

* probe:  ``ffmpeg -i IN`` (fps parsed from stderr)
* decode video: ``ffmpeg -v error -i IN -f rawvideo -pix_fmt rgb24 -``
* decode audio: ``ffmpeg -v error -i IN -vn -ac 1 -ar RATE -f s16le -``
* encode: ``ffmpeg -v error -y -f rawvideo -pix_fmt rgb24 -s WxH -r FPS -i - -i AUDIO
  -map 0:v -map 1:a -c:v CODEC -c:a copy OUT`` (``ffv1`` for ``.mkv``,
  ``libx264 -crf 0`` otherwise)
"""
from __future__ import annotations

import os
import re
import shutil
import subprocess
import wave
from pathlib import Path

import numpy as np

from . import container
from .exceptions import FormatError, MediaError

CLIP_SUFFIX = ".clip"


# --------------------------------------------------------------------------- wav

def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono float32 samples in [-1, 1] and the sample rate."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_ch, width, rate, n = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError, OSError) as exc:
        raise MediaError(f"cannot decode WAV {path}: {exc}") from exc
    if width == 1:
        data = (np.frombuffer(raw, np.uint8).astype(np.float32) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, "<i2").astype(np.float32) / 32768.0
    elif width == 4:
        data = np.frombuffer(raw, "<i4").astype(np.float32) / 2147483648.0
    else:
        raise MediaError(f"{path}: unsupported sample width {width}")
    return data.reshape(-1, n_ch).mean(axis=1), rate


def write_wav(path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------- clip containers

def _to_uint8(frames) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames
    return (np.clip(frames, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_frames_container(path, frames, fps: float, audio_bytes: bytes | None = None,
                           audio_name: str | None = None) -> None:
    arrays = {"frames": _to_uint8(frames)}
    meta = {"fps": float(fps), "media": "clip"}
    if audio_bytes is not None:
        arrays["audio"] = np.frombuffer(audio_bytes, dtype=np.uint8)
        meta["audio_name"] = audio_name or "audio"
    container.save(path, arrays, meta)


def read_clip(path) -> dict:
    """All contents of a ``.clip`` file: ``frames``, ``fps`` and optional ``audio`` bytes."""
    try:
        arrays, meta = container.load(path)
    except (FormatError, OSError) as exc:
        raise MediaError(f"cannot decode clip {path}: {exc}") from exc
    if "frames" not in arrays or "fps" not in meta:
        raise MediaError(f"{path}: clip lacks frames or fps")
    out = {"frames": arrays["frames"], "fps": float(meta["fps"])}
    if "audio" in arrays:
        out["audio"] = arrays["audio"].tobytes()
        out["audio_name"] = meta.get("audio_name", "audio")
    return out


def read_frames_container(path) -> tuple[np.ndarray, float]:
    clip = read_clip(path)
    return clip["frames"], clip["fps"]


# --------------------------------------------------------------------------- external transcoder

def find_transcoder() -> str | None:
    exe = os.environ.get("SYNCLIP_FFMPEG") or shutil.which("ffmpeg")
    if exe:
        return exe
    try:
        import imageio_ffmpeg
    except ImportError:
        return None
    try:
        return imageio_ffmpeg.get_ffmpeg_exe()
    except RuntimeError:
        return None


def _run(args, stdin=None) -> bytes:
    exe = find_transcoder()
    if exe is None:
        raise MediaError("no external transcoder found (set SYNCLIP_FFMPEG or install ffmpeg)")
    proc = subprocess.run([exe, *args], input=stdin, capture_output=True)
    if proc.returncode != 0:
        raise MediaError(f"transcoder failed ({' '.join(args[:6])} ...): {proc.stderr.decode(errors='replace')[-400:]}")
    return proc.stdout


def _probe(path) -> tuple[int, int, float]:
    exe = find_transcoder()
    if exe is None:
        raise MediaError("no external transcoder found (set SYNCLIP_FFMPEG or install ffmpeg)")
    err = subprocess.run([exe, "-hide_banner", "-i", str(path)], capture_output=True).stderr.decode(errors="replace")
    m = re.search(r"Video:.*?(\d{2,5})x(\d{2,5}).*?([\d.]+) (?:fps|tbr)", err)
    if not m:
        raise MediaError(f"cannot probe video stream of {path}")
    return int(m.group(1)), int(m.group(2)), float(m.group(3))


def read_video(path) -> tuple[np.ndarray, float]:
    """uint8 RGB frames ``(n, H, W, 3)`` and the frame rate."""
    if not Path(path).exists():
        raise MediaError(f"{path}: no such file")
    if Path(path).suffix == CLIP_SUFFIX:
        return read_frames_container(path)
    w, h, fps = _probe(path)
    raw = _run(["-v", "error", "-i", str(path), "-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
    n = len(raw) // (w * h * 3)
    return np.frombuffer(raw[:n * w * h * 3], np.uint8).reshape(n, h, w, 3), fps


def read_audio(path, sample_rate: int) -> np.ndarray:
    """Mono float32 samples at ``sample_rate``; WAV files must already be at that rate."""
    if not Path(path).exists():
        raise MediaError(f"{path}: no such file")
    if Path(path).suffix.lower() == ".wav":
        samples, rate = read_wav(path)
        if rate != sample_rate:
            raise MediaError(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
        return samples
    raw = _run(["-v", "error", "-i", str(path), "-vn", "-ac", "1", "-ar", str(sample_rate), "-f", "s16le", "-"])
    return np.frombuffer(raw, "<i2").astype(np.float32) / 32768.0


def write_video(path, frames, fps: float, audio_path) -> None:
    """Mux frames with the audio file, copying the audio stream unchanged."""
    frames = _to_uint8(frames)
    if Path(path).suffix == CLIP_SUFFIX:
        audio_bytes = Path(audio_path).read_bytes()
        write_frames_container(path, frames, fps, audio_bytes, Path(audio_path).name)
        return
    n, h, w, _ = frames.shape
    codec = ["-c:v", "ffv1"] if Path(path).suffix == ".mkv" else ["-c:v", "libx264", "-crf", "0"]
    _run(["-v", "error", "-y", "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{w}x{h}", "-r", repr(float(fps)),
          "-i", "-", "-i", str(audio_path), "-map", "0:v", "-map", "1:a", *codec, "-c:a", "copy",
          str(path)], stdin=frames.tobytes())
