"""Audio-video windowing, mel features, pair sampling and the synthetic toy corpus.

Shapes follow one convention everywhere: frames are channels-last
``(..., H, W, 3)`` floats in [0, 1], mel spectrograms are ``(steps, D)``.
A video frame index ``i`` maps to mel step ``round(i / fps * sample_rate / mel_hop)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigMismatch, InputTooShort, OutOfRange, ShapeError

LOG_FLOOR = -5.0


@dataclass(frozen=True)
class WindowConfig:
    """Every shape symbol of the pipeline in one validated record.

    Defaults reproduce the 96x96 setting: a 5-frame video window at 25 fps
    spans 0.2 s, which is exactly 16 mel steps of 200 samples at 16 kHz.
    """

    Tv: int = 5
    Ta: int = 16
    D: int = 80
    H: int = 96
    W: int = 96
    fps: float = 25.0
    sample_rate: int = 16000
    mel_hop: int = 200
    mel_win: int = 800
    mel_fmin: float = 55.0
    mel_fmax: float = 7600.0

    def __post_init__(self):
        if self.Tv < 1 or self.Ta < 1 or self.D < 1:
            raise ConfigMismatch("Tv, Ta and D must be >= 1")
        if self.H % 16 or self.W % 16 or self.H <= 0 or self.W <= 0:
            raise ConfigMismatch(f"H and W must be positive multiples of 16, got {self.H}x{self.W}")
        if self.fps <= 0 or self.sample_rate <= 0 or self.mel_hop <= 0 or self.mel_win <= 0:
            raise ConfigMismatch("fps, sample_rate, mel_hop and mel_win must be positive")
        audio_span = self.Ta * self.mel_hop / self.sample_rate
        video_span = self.Tv / self.fps
        if abs(audio_span - video_span) > self.mel_hop / self.sample_rate + 1e-12:
            raise ConfigMismatch(
                f"audio window ({audio_span:.4f}s) must span the video window ({video_span:.4f}s) "
                "within one hop")
        if not 0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2:
            raise ConfigMismatch("need 0 <= mel_fmin < mel_fmax <= sample_rate/2")

    @property
    def steps_per_frame(self) -> float:
        return self.sample_rate / (self.fps * self.mel_hop)

    @property
    def samples_per_frame(self) -> float:
        return self.sample_rate / self.fps

    def with_window(self, Tv: int) -> "WindowConfig":
        """Same audio/video setup with a different temporal window; Ta follows Tv."""
        Ta = max(1, int(round(Tv * self.steps_per_frame)))
        return WindowConfig(**{**self.to_dict(), "Tv": Tv, "Ta": Ta})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "WindowConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def toy_window_config(**overrides) -> WindowConfig:
    """The desk-scale configuration used by the toy corpus: 32x32 faces, 16 mel bands."""
    base = dict(Tv=5, Ta=16, D=16, H=32, W=32, mel_fmin=55.0, mel_fmax=7600.0)
    base.update(overrides)
    return WindowConfig(**base)


@dataclass
class MelSpectrogram:
    values: np.ndarray
    sample_rate: int
    mel_hop: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"mel values must be 2-D (steps, D), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigMismatch("mel spectrogram contains NaN/Inf")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]


@dataclass
class FaceTrack:
    frames: np.ndarray
    fps: float
    source_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.dtype == np.uint8:
            frames = frames.astype(np.float32) / 255.0
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (num_frames, H, W, 3), got {frames.shape}")
        self.frames = np.clip(frames.astype(np.float32, copy=False), 0.0, 1.0)

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class SyncPair:
    face_window: np.ndarray
    audio_window: np.ndarray
    label: int
    video_index: int
    audio_index: int


@dataclass
class GeneratorBatch:
    reference: np.ndarray
    pose_prior: np.ndarray
    target: np.ndarray
    audio: np.ndarray
    Tv: int = 1
    track_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    reference_starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def expert_audio(self) -> np.ndarray:
        """One audio window per group of Tv frames: the window aligned with the group's first frame."""
        return self.audio[::self.Tv]


# --------------------------------------------------------------------------- mel front-end

def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: WindowConfig) -> np.ndarray:
    """D + 2 frequencies (Hz): band k rises from edge k, peaks at k+1, falls to k+2."""
    return _mel_to_hz(np.linspace(_hz_to_mel(cfg.mel_fmin), _hz_to_mel(cfg.mel_fmax), cfg.D + 2))


def mel_filterbank(cfg: WindowConfig) -> np.ndarray:
    """Triangular (D, n_fft//2 + 1) filterbank with unit peak, HTK mel scale."""
    n_bins = cfg.mel_win // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.mel_win
    edges = mel_band_edges(cfg)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    return np.maximum(0.0, np.minimum(lower, upper))


def extract_mel(waveform, sample_rate: int, cfg: WindowConfig) -> MelSpectrogram:
    """Log-mel magnitudes of ``waveform``; one step per ``mel_hop`` samples, no padding."""
    wav = np.asarray(waveform, dtype=np.float64)
    if wav.ndim != 1:
        raise ShapeError(f"waveform must be 1-D, got {wav.shape}")
    if int(sample_rate) != cfg.sample_rate:
        raise ConfigMismatch(f"waveform rate {sample_rate} != configured {cfg.sample_rate}")
    if wav.shape[0] < cfg.mel_win:
        raise InputTooShort(f"waveform has {wav.shape[0]} samples, need >= {cfg.mel_win}")
    n_steps = 1 + (wav.shape[0] - cfg.mel_win) // cfg.mel_hop
    frames = np.lib.stride_tricks.sliding_window_view(wav, cfg.mel_win)[::cfg.mel_hop][:n_steps]
    window = np.hanning(cfg.mel_win + 1)[:-1]
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) / (window.sum() / 2.0)
    mel = spec @ mel_filterbank(cfg).T
    logmel = np.maximum(np.log(np.maximum(mel, 1e-30)), LOG_FLOOR)
    return MelSpectrogram(logmel, cfg.sample_rate, cfg.mel_hop)


class MelSpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping 1-D waveforms to :class:`MelSpectrogram`."""

    def __init__(self, cfg: WindowConfig | None = None):
        self.cfg = cfg

    def fit(self, X=None, y=None):
        self.cfg_ = self.cfg or WindowConfig()
        return self

    def transform(self, X):
        cfg = getattr(self, "cfg_", None) or self.cfg or WindowConfig()
        if isinstance(X, np.ndarray) and X.ndim == 1:
            return extract_mel(X, cfg.sample_rate, cfg)
        return [extract_mel(w, cfg.sample_rate, cfg) for w in X]


# --------------------------------------------------------------------------- windowing

def audio_start_step(frame_index: int, cfg: WindowConfig) -> int:
    return int(math.floor(frame_index * cfg.steps_per_frame + 0.5))


def slice_audio_window(mel: MelSpectrogram, frame_index: int, cfg: WindowConfig) -> np.ndarray:
    """The (Ta, D) mel window starting at the step aligned with ``frame_index``."""
    if mel.values.shape[1] != cfg.D:
        raise ConfigMismatch(f"mel has {mel.values.shape[1]} channels, config says D={cfg.D}")
    start = audio_start_step(frame_index, cfg)
    if frame_index < 0 or start + cfg.Ta > mel.n_steps:
        raise OutOfRange(f"audio window for frame {frame_index} ([{start}, {start + cfg.Ta})) "
                         f"exceeds {mel.n_steps} mel steps")
    return mel.values[start:start + cfg.Ta]


def mask_lower_half(frames) -> np.ndarray:
    """Copy of ``frames`` with rows [H/2, H) zeroed."""
    frames = np.asarray(frames)
    if frames.ndim < 3 or frames.shape[-1] != 3:
        raise ShapeError(f"expected (..., H, W, 3), got {frames.shape}")
    H = frames.shape[-3]
    if H % 2:
        raise ConfigMismatch(f"H must be even to mask the lower half, got {H}")
    out = frames.copy()
    out[..., H // 2:, :, :] = 0
    return out


def lower_half(frames) -> np.ndarray:
    frames = np.asarray(frames)
    H = frames.shape[-3]
    if H % 2:
        raise ConfigMismatch(f"H must be even, got {H}")
    return frames[..., H // 2:, :, :]


def stack_window_channels(window) -> np.ndarray:
    """(Tv, h, w, 3) -> (h, w, 3*Tv), frames in temporal order along channels."""
    window = np.asarray(window)
    Tv, h, w, c = window.shape
    return window.transpose(1, 2, 0, 3).reshape(h, w, Tv * c)


def max_window_start(n_frames: int, mel: MelSpectrogram, cfg: WindowConfig) -> int:
    """Largest frame index at which both a Tv-frame window and its audio window fit (-1 if none)."""
    last = n_frames - cfg.Tv
    while last >= 0 and audio_start_step(last, cfg) + cfg.Ta > mel.n_steps:
        last -= 1
    return last


def _check_track(track: FaceTrack, mel: MelSpectrogram, cfg: WindowConfig):
    if track.frames.shape[1:3] != (cfg.H, cfg.W):
        raise ConfigMismatch(f"track frames are {track.frames.shape[1:3]}, config says {(cfg.H, cfg.W)}")
    if abs(track.fps - cfg.fps) > 1e-9:
        raise ConfigMismatch(f"track fps {track.fps} != configured {cfg.fps}")
    if mel.sample_rate != cfg.sample_rate or mel.mel_hop != cfg.mel_hop or mel.values.shape[1] != cfg.D:
        raise ConfigMismatch("mel spectrogram parameters disagree with config")


def _face_window(track: FaceTrack, start: int, cfg: WindowConfig) -> np.ndarray:
    return lower_half(track.frames[start:start + cfg.Tv])


def sample_sync_pair(track: FaceTrack, mel: MelSpectrogram, cfg: WindowConfig,
                     rng_seed, positive: bool) -> SyncPair:
    """Draw one in-sync (label 1) or off-sync (label 0) pair from a single track.

    Off-sync pairs keep audio and video windows at least ``Tv`` frames apart so
    the two windows never overlap.
    """
    _check_track(track, mel, cfg)
    rng = np.random.default_rng(rng_seed)
    last = max_window_start(len(track), mel, cfg)
    if last < 0:
        raise InputTooShort(f"track {track.source_id!r} is shorter than one window")
    if positive:
        v = int(rng.integers(0, last + 1))
        a = v
    else:
        if last < cfg.Tv:
            raise InputTooShort(f"track {track.source_id!r} cannot hold two disjoint windows")
        v = int(rng.integers(0, last + 1))
        far = np.concatenate([np.arange(0, max(0, v - cfg.Tv + 1)), np.arange(v + cfg.Tv, last + 1)])
        if far.size == 0:
            # v sits in the middle of a short track; move it to an end
            v = 0 if rng.random() < 0.5 else last
            far = np.concatenate([np.arange(0, max(0, v - cfg.Tv + 1)), np.arange(v + cfg.Tv, last + 1)])
        a = int(far[rng.integers(0, far.size)])
    return SyncPair(face_window=_face_window(track, v, cfg),
                    audio_window=slice_audio_window(mel, a, cfg),
                    label=int(bool(positive)), video_index=v, audio_index=a)


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch pairs into expert inputs ``(N, H/2, W, 3Tv)``, ``(N, Ta, D)`` and labels."""
    faces = np.stack([stack_window_channels(p.face_window) for p in pairs])
    audio = np.stack([p.audio_window for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.float32)
    return faces, audio, labels


def sample_pair_batch(tracks, mels, cfg: WindowConfig, rng_seed, batch_size: int):
    """Balanced batch: the first half in-sync, the second half off-sync."""
    if not tracks:
        raise InputTooShort("empty corpus")
    rng = np.random.default_rng(rng_seed)
    n_pos = batch_size // 2
    pairs = []
    for i in range(batch_size):
        k = int(rng.integers(0, len(tracks)))
        pairs.append(sample_sync_pair(tracks[k], mels[k], cfg, rng.integers(0, 2**63), positive=i < n_pos))
    return pairs


def build_generator_batch(tracks, mels, cfg: WindowConfig, rng_seed, N: int) -> GeneratorBatch:
    """N (reference window, target window) groups stacked along the batch axis.

    Each group takes a random target window and a distinct random reference
    window from the same track. Per-frame audio windows start at each target
    frame's aligned mel step.
    """
    if not tracks or len(tracks) != len(mels):
        raise InputTooShort("need at least one track with a matching mel spectrogram")
    rng = np.random.default_rng(rng_seed)
    usable = []
    for k, (track, mel) in enumerate(zip(tracks, mels)):
        _check_track(track, mel, cfg)
        last_video = len(track) - cfg.Tv
        last_audio = _last_frame_with_audio(mel, cfg) - cfg.Tv + 1
        last = min(last_video, last_audio)
        if last >= 1:
            usable.append((k, last))
    if not usable:
        raise InputTooShort("no track supports two distinct windows")
    ref, prior, tgt, aud = [], [], [], []
    ks, ts, rs = [], [], []
    for _ in range(N):
        k, last = usable[int(rng.integers(0, len(usable)))]
        t = int(rng.integers(0, last + 1))
        r = int(rng.integers(0, last))
        if r >= t:
            r += 1
        frames = tracks[k].frames
        target = frames[t:t + cfg.Tv]
        tgt.append(target)
        prior.append(mask_lower_half(target))
        ref.append(frames[r:r + cfg.Tv])
        aud.append(np.stack([slice_audio_window(mels[k], t + j, cfg) for j in range(cfg.Tv)]))
        ks.append(k)
        ts.append(t)
        rs.append(r)
    cat = lambda xs: np.concatenate(xs, axis=0)
    return GeneratorBatch(reference=cat(ref), pose_prior=cat(prior), target=cat(tgt), audio=cat(aud),
                          Tv=cfg.Tv, track_indices=np.array(ks), target_starts=np.array(ts),
                          reference_starts=np.array(rs))


def _last_frame_with_audio(mel: MelSpectrogram, cfg: WindowConfig) -> int:
    """Largest frame index whose own Ta-step audio window fits in ``mel``."""
    i = int((mel.n_steps - cfg.Ta) / cfg.steps_per_frame) + 1
    while i >= 0 and audio_start_step(i, cfg) + cfg.Ta > mel.n_steps:
        i -= 1
    return i


def frame_audio_windows(mel: MelSpectrogram, n_frames: int, cfg: WindowConfig) -> np.ndarray:
    """Per-frame audio windows for a whole clip; frames past the audio end reuse the last window."""
    last = _last_frame_with_audio(mel, cfg)
    if last < 0:
        raise InputTooShort(f"audio ({mel.n_steps} steps) shorter than one window ({cfg.Ta})")
    return np.stack([slice_audio_window(mel, min(i, last), cfg) for i in range(n_frames)])


# --------------------------------------------------------------------------- synthetic corpus

@dataclass
class ToyClip:
    track: FaceTrack
    waveform: np.ndarray
    mouth_open: np.ndarray


TOY_EDGE_PX = 3.0


def _soft_ellipse(yy, xx, cy, cx, ry, rx, px):
    # linear edge ramp about TOY_EDGE_PX pixels wide; soft edges keep the toy faces low-frequency
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.0 - d) * np.minimum(ry, rx) * px / TOY_EDGE_PX + 0.5, 0.0, 1.0)


def _mouth_envelope(rng, n_frames):
    raw = rng.random(n_frames + 2)
    smooth = np.convolve(raw, [0.25, 0.5, 0.25], mode="valid")
    smooth = (smooth - smooth.min()) / max(smooth.max() - smooth.min(), 1e-9)
    return 0.1 + 0.9 * smooth


def synth_toy_clip(cfg: WindowConfig, seed, n_frames: int, source_id: str = "") -> ToyClip:
    """One procedural talking-face clip whose mouth opening follows the speech loudness.

    The face is a shaded ellipse with eyes in the upper half and a dark mouth
    ellipse in the lower half; the mouth height at frame t is an affine map of
    the loudness envelope at frame t. Audio is a harmonic tone with per-track
    pitch, amplitude-modulated by the same envelope.
    """
    rng = np.random.default_rng(seed)
    H, W = cfg.H, cfg.W
    mouth = _mouth_envelope(rng, n_frames)

    spf = cfg.samples_per_frame
    n_samples = int(math.ceil(n_frames * spf)) + cfg.mel_win
    t = np.arange(n_samples) / cfg.sample_rate
    # piecewise-constant loudness per video frame with short raised-cosine transitions
    pos = (np.arange(n_samples) + 0.5) / spf
    idx = np.minimum(pos.astype(np.int64), n_frames - 1)
    frac = pos - np.floor(pos)
    nxt = np.minimum(idx + 1, n_frames - 1)
    ramp = np.clip((frac - 0.875) / 0.125, 0.0, 1.0)
    ramp = 0.5 - 0.5 * np.cos(np.pi * ramp)
    amp = mouth[idx] * (1 - ramp) + mouth[nxt] * ramp
    f0 = rng.uniform(110.0, 240.0)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    carrier = sum(np.sin(2 * np.pi * f0 * (k + 1) * t + phases[k]) / (k + 1) for k in range(4))
    noise = 0.05 * rng.standard_normal(n_samples)
    waveform = (0.4 * amp * (carrier / 2.08 + noise)).astype(np.float32)

    yy, xx = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    bg = rng.uniform(0.05, 0.95, size=3)
    skin = rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7])
    lip = np.array([0.25, 0.03, 0.06]) * rng.uniform(0.6, 1.2)
    ry, rx = rng.uniform(0.36, 0.44), rng.uniform(0.28, 0.36)
    mouth_w = rng.uniform(0.11, 0.17)
    steps = rng.normal(0.0, 0.006, size=(n_frames, 2))
    jitter = np.clip(np.cumsum(steps, axis=0), -0.04, 0.04)

    frames = np.empty((n_frames, H, W, 3), dtype=np.float32)
    for i in range(n_frames):
        cy, cx = 0.5 + jitter[i, 0], 0.5 + jitter[i, 1]
        img = np.broadcast_to(bg, (H, W, 3)).copy()
        face = _soft_ellipse(yy, xx, cy, cx, ry, rx, H)[..., None]
        img = img * (1 - face) + skin * face
        for ex in (cx - 0.12, cx + 0.12):
            eye = _soft_ellipse(yy, xx, cy - 0.12, ex, 0.045, 0.06, H)[..., None]
            img = img * (1 - eye) + 0.08 * eye
        mh = 0.02 + 0.12 * mouth[i]
        m = _soft_ellipse(yy, xx, cy + 0.22, cx, mh, mouth_w, H)[..., None]
        img = img * (1 - m) + lip * m
        frames[i] = img
    track = FaceTrack(frames, cfg.fps, source_id)
    return ToyClip(track=track, waveform=waveform, mouth_open=mouth.astype(np.float32))


def synth_toy_corpus(cfg: WindowConfig, n_tracks: int, seed, n_frames=75, return_clips: bool = False):
    """``n_tracks`` procedural clips and their mel spectrograms, a pure function of ``seed``.

    ``n_frames`` is a fixed clip length or an inclusive ``(lo, hi)`` range drawn per clip.
    """
    if n_tracks < 2:
        raise InputTooShort("a toy corpus needs at least 2 tracks")
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_tracks + 1)
    if isinstance(n_frames, (tuple, list)):
        lo, hi = n_frames
        lengths = np.random.default_rng(children[-1]).integers(lo, hi + 1, size=n_tracks)
    else:
        lengths = np.full(n_tracks, int(n_frames))
    clips = [synth_toy_clip(cfg, ss, int(n), source_id=f"toy{seed}-{i:04d}")
             for i, (ss, n) in enumerate(zip(children[:-1], lengths))]
    tracks = [c.track for c in clips]
    mels = [extract_mel(c.waveform, cfg.sample_rate, cfg) for c in clips]
    if return_clips:
        return tracks, mels, clips
    return tracks, mels


# --------------------------------------------------------------------------- corpus manifest

def write_corpus_manifest(path, entries) -> None:
    """Write ``(track_id, frames_path, audio_path)`` records, one tab-separated line each."""
    lines = []
    for track_id, frames_path, audio_path in entries:
        for f in (track_id, frames_path, audio_path):
            if "\t" in str(f) or "\n" in str(f):
                raise ConfigMismatch(f"manifest field contains a tab or newline: {f!r}")
        lines.append(f"{track_id}\t{frames_path}\t{audio_path}\n")
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def read_corpus_manifest(path) -> list[tuple[str, str, str]]:
    base = Path(path).parent
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigMismatch(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        track_id, frames_path, audio_path = parts
        resolve = lambda p: str(p if Path(p).is_absolute() else base / p)
        out.append((track_id, resolve(frames_path), resolve(audio_path)))
    return out


def load_corpus(manifest_path, cfg: WindowConfig):
    """Read a manifest of container frame files and WAV audio into tracks and mels."""
    from . import media

    tracks, mels = [], []
    for track_id, frames_path, audio_path in read_corpus_manifest(manifest_path):
        frames, fps = media.read_frames_container(frames_path)
        wav, sr = media.read_wav(audio_path)
        tracks.append(FaceTrack(frames, fps, track_id))
        mels.append(extract_mel(wav, sr, cfg))
    return tracks, mels
