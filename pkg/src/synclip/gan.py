"""Visual-quality discriminator and the full generator training loop.

The generator minimises ``(1 - s_w - s_g) * L_recon + s_w * E_sync + s_g * L_gen``
against a frozen sync expert and a quality discriminator trained alongside it.
``L_gen`` in that sum is the non-saturating form ``-mean log D(G(x))``; the
discriminator maximises ``mean log D(real) + mean log(1 - D(fake))``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import losses
from ._utils import check_array, single_threaded, to_tensor
from .corpus import FaceTrack, WindowConfig, build_generator_batch
from .exceptions import ConfigMismatch, ContractViolation, ShapeError
from .expert import build_syncnet, expert_configs, expert_module
from .generator import (GeneratorConfig, build_generator, fold_for_expert, generator_configs,
                        init_generator, synthesize_track)
from .nets import QualityDiscriminator
from .params import ParameterSet, load_into_module, module_matches, params_from_module

log = logging.getLogger(__name__)

DISC_KIND = "quality_disc"


@dataclass(frozen=True)
class QualityDiscConfig:
    widths: tuple = (32, 64, 128, 256, 512)
    leaky_slope: float = 0.2

    def __post_init__(self):
        if not self.widths:
            raise ConfigMismatch("quality discriminator needs at least one stage")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_dict(self):
        return {"widths": list(self.widths), "leaky_slope": self.leaky_slope}

    @classmethod
    def from_dict(cls, d):
        return cls(widths=tuple(d["widths"]), leaky_slope=d.get("leaky_slope", 0.2))


def toy_disc_config() -> QualityDiscConfig:
    return QualityDiscConfig(widths=(8, 16, 32, 32))


@dataclass(frozen=True)
class TrainConfig:
    s_w: float = 0.03
    s_g: float = 0.07
    batch: int = 80
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    steps: int = 1000
    seed: int = 0
    disc_updates_per_gen: int = 1
    check_every: int = 100
    grad_clip: float | None = None  # max global grad norm for the generator; None disables

    def __post_init__(self):
        if self.s_w < 0 or self.s_g < 0:
            raise ConfigMismatch("s_w and s_g must be non-negative")
        if self.s_w + self.s_g >= 1:
            raise ConfigMismatch(f"s_w + s_g must be < 1, got {self.s_w + self.s_g}")
        if self.batch < 1 or self.steps < 0 or self.disc_updates_per_gen < 0:
            raise ConfigMismatch("batch >= 1, steps >= 0 and disc_updates_per_gen >= 0 required")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigMismatch("grad_clip must be positive or None")


def build_disc(cfg: QualityDiscConfig) -> QualityDiscriminator:
    return QualityDiscriminator(cfg.widths, cfg.leaky_slope)


def init_quality_disc(cfg: QualityDiscConfig, seed=0, zero_head: bool = False) -> ParameterSet:
    with torch.random.fork_rng():
        torch.manual_seed(int(np.random.SeedSequence(seed).generate_state(1)[0]))
        net = build_disc(cfg)
    if zero_head:
        torch.nn.init.zeros_(net.head.weight)
        torch.nn.init.zeros_(net.head.bias)
    return params_from_module(net, DISC_KIND, {"disc": cfg.to_dict()})


def disc_module(params: ParameterSet, dtype=torch.float32) -> QualityDiscriminator:
    cfg = QualityDiscConfig.from_dict(params.config["disc"])
    net = load_into_module(params, build_disc(cfg), dtype=dtype).to(dtype)
    net.eval()
    return net


def disc_forward(d_params: ParameterSet, images) -> np.ndarray:
    """Real-image probability per image, clamped to [delta, 1 - delta]."""
    imgs = check_array(images, 4, name="images")
    if imgs.shape[-1] != 3:
        raise ShapeError(f"images must be (M, H, W, 3), got {imgs.shape}")
    with torch.no_grad():
        p = disc_module(d_params)(to_tensor(imgs))
    return np.clip(p.numpy(), losses.DELTA, 1 - losses.DELTA)


def _as64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def gen_adv_loss(d_probs_on_generated) -> float:
    """mean log(1 - D(x)) over generated images (the literal adversarial term)."""
    return float(losses.adversarial_fake_term(_as64(d_probs_on_generated)))


def gen_nonsaturating_loss(d_probs_on_generated) -> float:
    """-mean log D(x): the adversarial term the generator actually minimises."""
    return float(losses.nonsaturating_generator_term(_as64(d_probs_on_generated)))


def disc_loss(d_probs_on_real, d_probs_on_generated) -> float:
    """mean log D(real) + mean log(1 - D(fake)); larger is a better discriminator."""
    return float(losses.disc_objective(_as64(d_probs_on_real), _as64(d_probs_on_generated)))


def total_generator_loss(l_recon, e_sync, l_gen_term, cfg: TrainConfig) -> float:
    if cfg.s_w + cfg.s_g >= 1:
        raise ConfigMismatch("s_w + s_g must be < 1")
    return float(losses.weighted_total(float(l_recon), float(e_sync), float(l_gen_term), cfg.s_w, cfg.s_g))


# --------------------------------------------------------------------------- training

def _adam(params, cfg: TrainConfig, lr=None):
    return torch.optim.Adam(params, lr=lr or cfg.lr, betas=(cfg.beta1, cfg.beta2))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def adversarial_training(tracks, mels, expert: ParameterSet, window: WindowConfig,
                         gen_cfg: GeneratorConfig, disc_cfg: QualityDiscConfig, cfg: TrainConfig, *,
                         finetune_expert: bool = False, expert_lr: float = 1e-4,
                         gen_init: ParameterSet | None = None, disc_init: ParameterSet | None = None,
                         run_dir=None, checkpoint_every: int = 0, callback=None):
    """Shared loop behind :func:`train_wav2lip` and the expert fine-tuning ablation.

    With ``finetune_expert`` the expert is a trainable copy updated after every
    generator step on real aligned windows (label 1) and generated windows
    (label 0). Returns ``(generator, disc, expert, history)``.
    """
    e_cfg, e_window = expert_configs(expert)
    if e_cfg.Tv != window.Tv or (e_window.H, e_window.W) != (window.H, window.W):
        raise ConfigMismatch("expert window disagrees with training window")
    if (gen_cfg.H, gen_cfg.W) != (window.H, window.W):
        raise ConfigMismatch("generator resolution disagrees with training window")
    gen_params = gen_init or init_generator(gen_cfg, window, seed=[cfg.seed, 11])
    disc_params = disc_init or init_quality_disc(disc_cfg, seed=[cfg.seed, 13])
    use_disc = cfg.s_g > 0
    start_checksum = expert.checksum()
    history = []
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", {"train": asdict(cfg), "generator": gen_cfg.to_dict(),
                                              "disc": disc_cfg.to_dict(), "window": window.to_dict(),
                                              "expert_checksum": start_checksum,
                                              "finetune_expert": finetune_expert})
        metrics = open(run_dir / "metrics.jsonl", "w", encoding="utf-8")
    else:
        metrics = None

    with single_threaded():
        G = load_into_module(gen_params, build_generator(gen_cfg))
        D = load_into_module(disc_params, build_disc(disc_cfg))
        E = load_into_module(expert, build_syncnet(e_cfg))
        G.train()
        D.train()
        opt_g = _adam(G.parameters(), cfg)
        opt_d = _adam(D.parameters(), cfg)
        if finetune_expert:
            E.train()
            opt_e = torch.optim.Adam(E.parameters(), lr=expert_lr)
        else:
            E.eval()
            E.requires_grad_(False)
        batch_seeds = np.random.SeedSequence([int(np.random.SeedSequence(cfg.seed).generate_state(1)[0]), 2])

        for step, ss in enumerate(batch_seeds.spawn(cfg.steps), start=1):
            b = build_generator_batch(tracks, mels, window, ss, cfg.batch)
            target = to_tensor(b.target)
            exp_audio = to_tensor(b.expert_audio)
            fake = G(to_tensor(b.reference), to_tensor(b.pose_prior), to_tensor(b.audio))

            l_recon = losses.l1_reconstruction(fake, target)
            p_sync = losses.cosine_sync_probability(E.encode_face(fold_for_expert(fake, window.Tv)),
                                                    E.encode_audio(exp_audio), e_cfg.eps)
            e_sync = losses.expert_sync(p_sync)
            if use_disc:
                l_gen = losses.nonsaturating_generator_term(D(fake))
            else:
                l_gen = torch.zeros((), dtype=fake.dtype)
            l_total = losses.weighted_total(l_recon.double(), e_sync.double(), l_gen.double(), cfg.s_w, cfg.s_g)
            opt_g.zero_grad()
            if finetune_expert:
                opt_e.zero_grad()
            l_total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(G.parameters(), cfg.grad_clip)
            opt_g.step()

            l_disc = None
            if use_disc:
                fake_d = fake.detach()
                for _ in range(cfg.disc_updates_per_gen):
                    objective = losses.disc_objective(D(target), D(fake_d))
                    opt_d.zero_grad()
                    (-objective).backward()
                    opt_d.step()
                    l_disc = float(objective.detach())

            rec = {"step": step, "l_recon": float(l_recon.detach()), "e_sync": float(e_sync.detach()),
                   "l_gen": float(l_gen.detach()), "l_total": float(l_total.detach()), "l_disc": l_disc}

            if finetune_expert:
                faces = torch.cat([fold_for_expert(target, window.Tv), fold_for_expert(fake.detach(), window.Tv)])
                audio = torch.cat([exp_audio, exp_audio])
                labels = torch.cat([torch.ones(len(exp_audio)), torch.zeros(len(exp_audio))])
                p = losses.cosine_sync_probability(E.encode_face(faces), E.encode_audio(audio), e_cfg.eps)
                e_loss = losses.binary_cross_entropy(p, labels).mean()
                opt_e.zero_grad()
                e_loss.backward()
                opt_e.step()
                rec["expert_bce"] = float(e_loss.detach())
            elif step % cfg.check_every == 0 or step == cfg.steps:
                _assert_frozen(expert, E, start_checksum, step)

            history.append(rec)
            if metrics is not None:
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback is not None:
                callback(rec)
            if run_dir is not None and checkpoint_every and step % checkpoint_every == 0:
                _checkpoint(run_dir, step, G, D, gen_params, disc_params)

    if metrics is not None:
        metrics.close()
    if not finetune_expert:
        _assert_frozen(expert, E, start_checksum, cfg.steps)
    gen_out = params_from_module(G, gen_params.kind, gen_params.config,
                                 step_count=gen_params.step_count + cfg.steps)
    disc_out = params_from_module(D, disc_params.kind, disc_params.config,
                                  step_count=disc_params.step_count + cfg.steps)
    if finetune_expert:
        expert_out = params_from_module(E, expert.kind, expert.config,
                                        step_count=expert.step_count + cfg.steps)
    else:
        expert_out = expert
    if run_dir is not None:
        _checkpoint(run_dir, "final", G, D, gen_params, disc_params)
    return gen_out, disc_out, expert_out, history


def _assert_frozen(expert: ParameterSet, net, start_checksum: str, step):
    if expert.checksum() != start_checksum or not module_matches(expert, net):
        raise ContractViolation(f"sync expert parameters changed during generator training (step {step})")


def _checkpoint(run_dir: Path, tag, G, D, gen_params, disc_params):
    from .checkpoint import save_checkpoint

    g = params_from_module(G, gen_params.kind, gen_params.config)
    d = params_from_module(D, disc_params.kind, disc_params.config)
    save_checkpoint(g, g.config, run_dir / f"generator_{tag}.ckpt")
    save_checkpoint(d, d.config, run_dir / f"disc_{tag}.ckpt")


def train_wav2lip(tracks, mels, expert: ParameterSet, gen_cfg: GeneratorConfig, disc_cfg: QualityDiscConfig,
                  train_cfg: TrainConfig, window: WindowConfig | None = None, **kwargs):
    """Train generator and quality discriminator against a frozen sync expert.

    Returns ``(generator, disc, history)``; ``history`` has one record per
    step with ``l_recon``, ``e_sync``, ``l_gen``, ``l_total`` and ``l_disc``.
    ``s_g = 0`` trains without the quality discriminator.
    """
    if not expert.frozen:
        raise ContractViolation("train_wav2lip needs a frozen sync expert")
    if window is None:
        _, window = expert_configs(expert)
    g, d, _, hist = adversarial_training(tracks, mels, expert, window, gen_cfg, disc_cfg, train_cfg,
                                         finetune_expert=False, **kwargs)
    return g, d, hist


def export_generated_images(gen_params: ParameterSet, tracks, mels, out_dir, max_frames=None) -> int:
    """Write generated frames as PNG files (inference protocol) for external image-quality tools."""
    import cv2

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    net = None
    from .generator import generator_module

    net = generator_module(gen_params)
    for track, mel in zip(tracks, mels):
        frames = synthesize_track(gen_params, track.frames[:max_frames], mel, net=net)
        for i, f in enumerate(frames):
            bgr = (np.clip(f, 0, 1) * 255 + 0.5).astype(np.uint8)[..., ::-1]
            cv2.imwrite(str(out_dir / f"{track.source_id or 'track'}_{i:05d}.png"), bgr)
            n += 1
    return n


class LipSyncer(BaseEstimator):
    """Estimator facade over the generator: ``fit`` trains, ``transform`` lip-syncs a track.

    ``transform`` takes ``(frames_or_track, mel)`` and returns generated frames
    following the inference protocol (current frame as reference and masked prior).
    """

    def __init__(self, window=None, generator_config=None, disc_config=None, s_w=0.03, s_g=0.07,
                 batch_size=80, learning_rate=1e-4, beta1=0.5, beta2=0.999, n_steps=1000,
                 disc_updates_per_gen=1, random_state=0):
        self.window = window
        self.generator_config = generator_config
        self.disc_config = disc_config
        self.s_w = s_w
        self.s_g = s_g
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.n_steps = n_steps
        self.disc_updates_per_gen = disc_updates_per_gen
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(s_w=self.s_w, s_g=self.s_g, batch=self.batch_size, lr=self.learning_rate,
                           beta1=self.beta1, beta2=self.beta2, steps=self.n_steps, seed=self.random_state,
                           disc_updates_per_gen=self.disc_updates_per_gen)

    def fit(self, tracks, mels, expert: ParameterSet, **kwargs):
        window = self.window or expert_configs(expert)[1]
        gen_cfg = self.generator_config or GeneratorConfig(H=window.H, W=window.W, Tv=window.Tv)
        disc_cfg = self.disc_config or QualityDiscConfig()
        self.generator_, self.disc_, self.history_ = train_wav2lip(
            tracks, mels, expert, gen_cfg, disc_cfg, self._train_config(), window, **kwargs)
        return self

    @classmethod
    def from_params(cls, generator: ParameterSet, **kwargs):
        gen_cfg, window = generator_configs(generator)
        est = cls(window=window, generator_config=gen_cfg, **kwargs)
        est.generator_ = generator
        est.history_ = []
        return est

    def transform(self, X):
        frames, mel = X
        if isinstance(frames, FaceTrack):
            frames = frames.frames
        return synthesize_track(self.generator_, frames, mel)

    predict = transform


def smoothed(values, window=20):
    """Trailing moving average (used to judge monotone loss trends)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def is_finite_history(history) -> bool:
    return all(math.isfinite(r["l_total"]) for r in history)
