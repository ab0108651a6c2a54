"""Lip-sync error metrics (LSE-D / LSE-C), consistent benchmarks and the sync-expert ablation.

LSE conventions, fixed so scores are comparable across runs of this package:

* embeddings from the scorer are L2-normalised, then compared by L2 distance;
* for every window position ``i`` (stride 1) the face window ``[i, i+Tv)`` is
  compared with audio windows aligned to frames ``i + o`` for
  ``o in [-max_offset, max_offset]``; positions where any offset falls off
  either stream are skipped;
* ``offset_curve[o]`` is the mean distance over positions, ``lse_d`` its
  minimum and ``lse_c = median(offset_curve) - min(offset_curve)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (FaceTrack, MelSpectrogram, WindowConfig, _last_frame_with_audio, extract_mel,
                     lower_half, stack_window_channels)
from .exceptions import ConfigMismatch, InputTooShort, ShapeError
from .expert import (encode_audio_window, encode_face_window, expert_configs, expert_module,
                     make_eval_pairs, off_sync_accuracy, toy_expert_config, train_expert)
from .params import ParameterSet

DEFAULT_MAX_OFFSET = 15


@dataclass
class LseReport:
    lse_d: float
    lse_c: float
    offset_curve: np.ndarray
    n_windows: int
    max_offset: int = DEFAULT_MAX_OFFSET

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.max_offset, self.max_offset + 1)

    @property
    def best_offset(self) -> int:
        return int(self.offsets[int(np.argmin(self.offset_curve))])


@dataclass(frozen=True)
class BenchmarkPair:
    video_id: str
    audio_source_id: str
    audio_len: float
    video_len: float
    seed: int

    def __post_init__(self):
        if not self.audio_len < self.video_len:
            raise ConfigMismatch(f"audio ({self.audio_len}s) must be shorter than video ({self.video_len}s)")
        if self.audio_source_id == self.video_id:
            raise ConfigMismatch("audio must come from a different video")


@dataclass
class AblationRow:
    Tv: int
    fine_tuned: bool
    off_sync_acc: float
    lse_d: float
    lse_c: float


# --------------------------------------------------------------------------- LSE metrics

def _unit(x, eps=1e-12):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps)


def lse_metrics(frames, mel: MelSpectrogram, scorer: ParameterSet, cfg: WindowConfig | None = None,
                max_offset: int = DEFAULT_MAX_OFFSET) -> LseReport:
    """Offset curve of mean face/audio embedding distances and the LSE-D / LSE-C summary."""
    s_cfg, s_window = expert_configs(scorer)
    cfg = cfg or s_window
    if (cfg.Tv, cfg.Ta, cfg.D, cfg.H, cfg.W) != (s_window.Tv, s_window.Ta, s_window.D, s_window.H, s_window.W):
        raise ShapeError("scorer was trained for a different window configuration")
    video = frames.frames if isinstance(frames, FaceTrack) else np.asarray(frames, dtype=np.float32)
    if video.dtype == np.uint8:
        video = video.astype(np.float32) / 255.0
    if video.ndim != 4 or video.shape[1:] != (cfg.H, cfg.W, 3):
        raise ShapeError(f"frames must be (n, {cfg.H}, {cfg.W}, 3), got {video.shape}")
    n = len(video)
    if n < cfg.Tv + 2 * max_offset:
        raise InputTooShort(f"{n} frames < Tv + 2*max_offset = {cfg.Tv + 2 * max_offset}")
    last_audio = _last_frame_with_audio(mel, cfg)
    first, last = max_offset, min(n - cfg.Tv, last_audio - max_offset)
    if last < first:
        raise InputTooShort("no window position has every offset inside both streams")
    positions = np.arange(first, last + 1)
    lows = lower_half(video)
    faces = np.stack([stack_window_channels(lows[i:i + cfg.Tv]) for i in positions])
    audio_idx = np.arange(first - max_offset, last + max_offset + 1)
    from .corpus import slice_audio_window
    audio = np.stack([slice_audio_window(mel, int(j), cfg) for j in audio_idx])
    net = expert_module(scorer)
    v = _unit(encode_face_window(scorer, faces, net=net).astype(np.float64))
    s = _unit(encode_audio_window(scorer, audio, net=net).astype(np.float64))
    offsets = np.arange(-max_offset, max_offset + 1)
    # audio row for position p and offset o is (p - first) + max_offset + o
    rows = (positions - first)[:, None] + max_offset + offsets[None, :]
    dists = np.linalg.norm(v[:, None, :] - s[rows], axis=-1)
    curve = dists.mean(axis=0)
    lse_d = float(curve.min())
    return LseReport(lse_d=lse_d, lse_c=float(np.median(curve) - lse_d), offset_curve=curve,
                     n_windows=len(positions), max_offset=max_offset)


def write_lse_reports(reports: dict, path) -> None:
    """One JSON line per clip (sorted by id) plus a final ``__mean__`` summary line."""
    lines = []
    for clip_id in sorted(reports):
        r = reports[clip_id]
        lines.append(json.dumps({"clip_id": clip_id, "lse_d": r.lse_d, "lse_c": r.lse_c,
                                 "n_windows": r.n_windows}, sort_keys=True))
    if reports:
        lines.append(json.dumps({"clip_id": "__mean__",
                                 "lse_d": float(np.mean([r.lse_d for r in reports.values()])),
                                 "lse_c": float(np.mean([r.lse_c for r in reports.values()])),
                                 "n_windows": int(sum(r.n_windows for r in reports.values()))}, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


class LseScorer:
    """Evaluation scorer facade; ``score`` returns an :class:`LseReport` for (frames, mel)."""

    def __init__(self, scorer: ParameterSet, max_offset: int = DEFAULT_MAX_OFFSET):
        self.scorer = scorer
        self.max_offset = max_offset

    def get_params(self, deep=True):
        return {"scorer": self.scorer, "max_offset": self.max_offset}

    def score(self, frames, mel) -> LseReport:
        return lse_metrics(frames, mel, self.scorer, max_offset=self.max_offset)

    def score_many(self, clips: dict) -> dict:
        return {k: self.score(f, m) for k, (f, m) in clips.items()}


# --------------------------------------------------------------------------- benchmarks

def corpus_durations(manifest_path) -> list[tuple[str, float]]:
    """(track_id, seconds) for every manifest entry, from the frame count and fps."""
    from .corpus import read_corpus_manifest
    from .media import read_frames_container

    out = []
    for track_id, frames_path, _ in read_corpus_manifest(manifest_path):
        frames, fps = read_frames_container(frames_path)
        out.append((track_id, len(frames) / fps))
    return out


def build_benchmark(corpus_manifest, seed, n_pairs: int) -> list[BenchmarkPair]:
    """Pseudo-random (video, shorter foreign audio) pairs, a pure function of the inputs.

    ``corpus_manifest`` is a sequence of ``(video_id, seconds)`` pairs or a
    mapping ``video_id -> seconds``. Durations are rounded to microseconds.
    """
    items = corpus_manifest.items() if isinstance(corpus_manifest, dict) else corpus_manifest
    entries = sorted({str(k): round(float(v), 6) for k, v in items}.items())
    if len(entries) < 2:
        raise InputTooShort("need at least two corpus entries")
    ids = [e[0] for e in entries]
    lens = np.array([e[1] for e in entries])
    partners = [np.flatnonzero(lens < lens[i]) for i in range(len(entries))]
    hosts = [i for i, p in enumerate(partners) if p.size]
    if not hosts:
        raise InputTooShort("no video has a strictly shorter partner audio")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        v = hosts[int(rng.integers(0, len(hosts)))]
        a = int(partners[v][rng.integers(0, partners[v].size)])
        pairs.append(BenchmarkPair(video_id=ids[v], audio_source_id=ids[a], audio_len=float(lens[a]),
                                   video_len=float(lens[v]), seed=int(rng.integers(0, 2**31 - 1))))
    return pairs


def format_benchmark(pairs) -> bytes:
    lines = [f"{p.video_id}\t{p.audio_source_id}\t{p.video_len:.6f}\t{p.audio_len:.6f}\t{p.seed}\n" for p in pairs]
    return "".join(lines).encode("utf-8")


def write_benchmark_manifest(pairs, path) -> None:
    Path(path).write_bytes(format_benchmark(pairs))


def read_benchmark_manifest(path) -> list[BenchmarkPair]:
    pairs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ConfigMismatch(f"{path}:{n}: expected 5 tab-separated fields")
        vid, aid, vlen, alen, seed = parts
        pairs.append(BenchmarkPair(video_id=vid, audio_source_id=aid, video_len=float(vlen),
                                   audio_len=float(alen), seed=int(seed)))
    return pairs


def toy_durations(tracks) -> list[tuple[str, float]]:
    return [(t.source_id, len(t) / t.fps) for t in tracks]


def evaluate_benchmark(generator: ParameterSet, scorer: ParameterSet, pairs, tracks, mels,
                       max_offset: int = DEFAULT_MAX_OFFSET) -> dict:
    """Lip-sync each benchmark video to its foreign audio (truncated to the audio) and score it."""
    from .generator import generator_configs, generator_module, synthesize_track

    _, g_window = generator_configs(generator)
    by_id = {t.source_id: (t, m) for t, m in zip(tracks, mels)}
    net = generator_module(generator)
    reports = {}
    for p in pairs:
        track, _ = by_id[p.video_id]
        _, audio_mel = by_id[p.audio_source_id]
        n = min(len(track), int(math.floor(p.audio_len * track.fps)))
        generated = synthesize_track(generator, track.frames[:n], audio_mel, net=net)
        reports[f"{p.video_id}|{p.audio_source_id}"] = lse_metrics(generated, audio_mel, scorer,
                                                                  max_offset=max_offset)
    return reports


def mean_lse(reports: dict) -> tuple[float, float]:
    return (float(np.mean([r.lse_d for r in reports.values()])),
            float(np.mean([r.lse_c for r in reports.values()])))


# --------------------------------------------------------------------------- shifted clips

def offset_clip(frames, waveform, k: int, cfg: WindowConfig):
    """Crop video and audio so the audio leads the video by ``k`` frames.

    The returned clip's offset curve has its minimum at ``-k`` (for a clip that
    was in sync before cropping). Returns ``(frames, mel)``.
    """
    frames = np.asarray(frames)
    spf = cfg.samples_per_frame
    if k >= 0:
        vid = frames[:len(frames) - k] if k else frames
        wav = np.asarray(waveform)[int(round(k * spf)):]
    else:
        vid = frames[-k:]
        wav = np.asarray(waveform)
    return vid, extract_mel(wav, cfg.sample_rate, cfg)


# --------------------------------------------------------------------------- ablation

@dataclass
class AblationBudget:
    expert_steps: int = 2000
    expert_schedule: str | None = "cosine"
    gen_steps: int = 300
    gen_batch: int = 4
    gen_lr: float = 1e-3
    grad_clip: float | None = 0.1
    expert_finetune_lr: float = 1e-4
    s_w: float = 0.03
    s_g: float = 0.0
    eval_pairs: int = 400
    n_benchmark: int = 6
    max_offset: int = 10
    tvs: tuple = (1, 3, 5)

    def __post_init__(self):
        if self.expert_steps < 1 or self.gen_steps < 1 or self.gen_batch < 1:
            raise ConfigMismatch("ablation budgets must be positive")
        if not set(self.tvs) <= {1, 3, 5} or len(set(self.tvs)) != len(self.tvs):
            raise ConfigMismatch("tvs must be distinct values from {1, 3, 5}")


def finetune_expert_in_gan(expert: ParameterSet, generator: ParameterSet, corpus, budget: int,
                           train_cfg=None, lr: float = 1e-4, seed=0) -> ParameterSet:
    """Keep training an unfrozen expert on generated (label 0) vs real (label 1) windows.

    The generator is trained alongside it; only the updated expert is returned.
    """
    if expert.frozen:
        raise ConfigMismatch("fine-tuning needs an unfrozen copy of the expert")
    if budget <= 0:
        return expert.copy()
    from .gan import TrainConfig, adversarial_training, toy_disc_config
    from .generator import generator_configs

    tracks, mels = corpus
    gen_cfg, window = generator_configs(generator)
    cfg = train_cfg or TrainConfig(s_w=0.03, s_g=0.0, batch=4, steps=budget, seed=seed)
    if cfg.steps != budget:
        cfg = TrainConfig(**{**asdict(cfg), "steps": budget})
    _, _, tuned, _ = adversarial_training(tracks, mels, expert, window, gen_cfg, toy_disc_config(), cfg,
                                          finetune_expert=True, expert_lr=lr, gen_init=generator)
    return tuned


def run_ablation(corpus, cfg: WindowConfig, budgets: AblationBudget, seed, *, eval_corpus=None,
                 scorer: ParameterSet | None = None, gen_config_fn=None, expert_config_fn=None,
                 log=None) -> list[AblationRow]:
    """Six-way temporal-window x fine-tuning study at toy scale.

    For each Tv an expert is trained on ``corpus``; a generator is then trained
    once against the frozen expert and once while fine-tuning an unfrozen copy
    of it. Off-sync accuracy is measured on balanced real pairs from
    ``eval_corpus``; LSE metrics come from ``scorer`` (a separately trained
    Tv=5 checkpoint) on benchmark pairs built from ``eval_corpus``.
    """
    from .gan import TrainConfig, adversarial_training, toy_disc_config
    from .generator import toy_generator_config

    tracks, mels = corpus
    if eval_corpus is None:
        raise ConfigMismatch("an evaluation corpus is required")
    e_tracks, e_mels = eval_corpus
    gen_config_fn = gen_config_fn or toy_generator_config
    expert_config_fn = expert_config_fn or toy_expert_config
    if scorer is None:
        scorer, _ = train_expert(tracks, mels, cfg.with_window(5), expert_config_fn(5),
                                 steps=budgets.expert_steps, seed=[seed, 777], lr_schedule=budgets.expert_schedule)
    scorer = scorer.copy().freeze() if not scorer.frozen else scorer
    pairs = build_benchmark(toy_durations(e_tracks), [seed, 5], budgets.n_benchmark)
    rows = []
    for Tv in budgets.tvs:
        window = cfg.with_window(Tv)
        t_tracks = [FaceTrack(t.frames, t.fps, t.source_id) for t in tracks]
        ev_pairs = make_eval_pairs(e_tracks, e_mels, window, [seed, Tv, 3], budgets.eval_pairs)
        expert, _ = train_expert(t_tracks, mels, window, expert_config_fn(Tv), steps=budgets.expert_steps,
                                 seed=[seed, Tv], lr_schedule=budgets.expert_schedule)
        expert.freeze()
        for fine_tuned in (False, True):
            tcfg = TrainConfig(s_w=budgets.s_w, s_g=budgets.s_g, batch=budgets.gen_batch, lr=budgets.gen_lr,
                               grad_clip=budgets.grad_clip, steps=budgets.gen_steps, seed=int(np.random.SeedSequence([seed, Tv]).generate_state(1)[0]))
            e_in = expert.unfrozen_copy() if fine_tuned else expert
            gen, _, e_out, _ = adversarial_training(tracks, mels, e_in, window, gen_config_fn(window),
                                                    toy_disc_config(), tcfg, finetune_expert=fine_tuned,
                                                    expert_lr=budgets.expert_finetune_lr)
            acc = off_sync_accuracy(e_out, ev_pairs)
            d, c = mean_lse(evaluate_benchmark(gen, scorer, pairs, e_tracks, e_mels, budgets.max_offset))
            row = AblationRow(Tv=Tv, fine_tuned=fine_tuned, off_sync_acc=acc, lse_d=d, lse_c=c)
            if log is not None:
                log(row)
            rows.append(row)
    return rows
