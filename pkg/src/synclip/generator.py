"""Frame-wise lip generator, L1 reconstruction and the frozen-expert sync loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import losses
from ._utils import check_array, check_same_length, to_tensor
from .corpus import WindowConfig, frame_audio_windows, mask_lower_half
from .exceptions import ConfigMismatch, ContractViolation, ShapeError
from .expert import expert_configs, expert_module
from .nets import LipGenerator
from .params import ParameterSet, load_into_module, params_from_module

GENERATOR_KIND = "generator"


@dataclass(frozen=True)
class GeneratorConfig:
    H: int = 96
    W: int = 96
    Tv: int = 5
    base_width: int = 16
    audio_widths: tuple = (32, 64, 128, 256)
    bottleneck: int = 512
    skip_connections: bool = True
    use_residual: bool = True

    def __post_init__(self):
        if self.H % 16 or self.W % 16:
            raise ConfigMismatch("generator H and W must be multiples of 16")
        if not self.skip_connections:
            raise ConfigMismatch("the decoder is built with skip connections")
        object.__setattr__(self, "audio_widths", tuple(int(w) for w in self.audio_widths))

    @property
    def input_channels(self) -> int:
        return 6

    def to_dict(self):
        d = asdict(self)
        d["audio_widths"] = list(self.audio_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()
                      if k in cls.__dataclass_fields__})


def toy_generator_config(window: WindowConfig, **overrides) -> GeneratorConfig:
    base = dict(H=window.H, W=window.W, Tv=window.Tv, base_width=8, audio_widths=(16, 32, 64), bottleneck=64)
    base.update(overrides)
    return GeneratorConfig(**base)


@dataclass
class LossReport:
    l_recon: float
    e_sync: float
    l_gen: float
    l_total: float
    s_w: float
    s_g: float


def build_generator(cfg: GeneratorConfig) -> LipGenerator:
    return LipGenerator(cfg.H, cfg.W, cfg.base_width, cfg.audio_widths, cfg.bottleneck, cfg.use_residual)


def generator_configs(params: ParameterSet) -> tuple[GeneratorConfig, WindowConfig]:
    try:
        return GeneratorConfig.from_dict(params.config["generator"]), WindowConfig.from_dict(params.config["window"])
    except KeyError as exc:
        raise ConfigMismatch(f"parameter set lacks generator config: {exc}") from exc


def init_generator(cfg: GeneratorConfig, window: WindowConfig, seed=0) -> ParameterSet:
    if (cfg.H, cfg.W) != (window.H, window.W):
        raise ConfigMismatch("generator resolution must match the window config")
    with torch.random.fork_rng():
        torch.manual_seed(int(np.random.SeedSequence(seed).generate_state(1)[0]))
        net = build_generator(cfg)
    return params_from_module(net, GENERATOR_KIND, {"generator": cfg.to_dict(), "window": window.to_dict()})


def generator_module(params: ParameterSet, dtype=torch.float32) -> LipGenerator:
    cfg, _ = generator_configs(params)
    net = load_into_module(params, build_generator(cfg), dtype=dtype).to(dtype)
    net.eval()
    return net


def generate_frames(params: ParameterSet, reference, prior, audio, net=None, batch: int = 256) -> np.ndarray:
    """Generate one face per batch row from (reference, pose prior, audio window)."""
    cfg, window = generator_configs(params)
    ref = check_array(reference, 4, name="reference", last=(cfg.H, cfg.W, 3))
    pri = check_array(prior, 4, name="pose prior", last=(cfg.H, cfg.W, 3))
    aud = check_array(audio, 3, name="audio", last=(window.Ta, window.D))
    check_same_length(ref, pri, aud, names=("reference", "prior", "audio"))
    net = net or generator_module(params)
    out = []
    with torch.no_grad():
        for i in range(0, len(ref), batch):
            out.append(net(to_tensor(ref[i:i + batch]), to_tensor(pri[i:i + batch]),
                           to_tensor(aud[i:i + batch])).numpy())
    return np.concatenate(out) if out else np.zeros((0, cfg.H, cfg.W, 3), np.float32)


def synthesize_track(params: ParameterSet, frames, mel, net=None) -> np.ndarray:
    """Inference protocol: each frame is its own reference and, lower-half masked, its own pose prior."""
    _, window = generator_configs(params)
    frames = check_array(frames, 4, name="frames", last=(window.H, window.W, 3))
    audio = frame_audio_windows(mel, len(frames), window)
    return generate_frames(params, frames, mask_lower_half(frames), audio, net=net)


def reconstruction_loss(L_g, L_G) -> float:
    """Mean absolute error over every element (resolution independent)."""
    a = np.asarray(L_g, dtype=np.float64)
    b = np.asarray(L_G, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"generated {a.shape} vs ground truth {b.shape}")
    return float(losses.l1_reconstruction(torch.from_numpy(a), torch.from_numpy(b)))


def fold_for_expert(frames, Tv: int):
    """(N*Tv, H, W, 3) -> (N, H/2, W, 3*Tv): lower halves, time concatenated on channels.

    Accepts numpy arrays or torch tensors (differentiable).
    """
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeError(f"expected (N*Tv, H, W, 3), got {tuple(frames.shape)}")
    B, H, W, _ = frames.shape
    if Tv < 1 or B % Tv:
        raise ShapeError(f"batch {B} is not divisible by Tv={Tv}")
    if H % 2:
        raise ShapeError(f"H={H} must be even")
    lower = frames[:, H // 2:]
    grouped = lower.reshape(B // Tv, Tv, H // 2, W, 3)
    if isinstance(frames, torch.Tensor):
        moved = grouped.permute(0, 2, 3, 1, 4)
    else:
        moved = grouped.transpose(0, 2, 3, 1, 4)
    return moved.reshape(B // Tv, H // 2, W, 3 * Tv)


def unfold_from_expert(folded, Tv: int):
    """Inverse of :func:`fold_for_expert` on the lower halves: -> (N*Tv, H/2, W, 3)."""
    N, h, W, C = folded.shape
    if C != 3 * Tv:
        raise ShapeError(f"{C} channels cannot hold {Tv} RGB frames")
    grouped = folded.reshape(N, h, W, Tv, 3)
    if isinstance(folded, torch.Tensor):
        moved = grouped.permute(0, 3, 1, 2, 4)
    else:
        moved = grouped.transpose(0, 3, 1, 2, 4)
    return moved.reshape(N * Tv, h, W, 3)


def expert_sync_loss(expert: ParameterSet, folded_faces, audio_windows, net=None):
    """Mean -log P_sync of folded generated faces against their aligned audio windows.

    The expert must be frozen. Passing torch tensors returns a differentiable
    tensor whose gradient reaches the faces only; numpy inputs return a float.
    """
    if not expert.frozen:
        raise ContractViolation("the sync expert must be frozen before it can penalise the generator")
    cfg, _ = expert_configs(expert)
    as_tensor = isinstance(folded_faces, torch.Tensor)
    faces = folded_faces if as_tensor else to_tensor(folded_faces)
    audio = audio_windows if isinstance(audio_windows, torch.Tensor) else to_tensor(audio_windows, faces.dtype)
    if net is None:
        net = expert_module(expert, dtype=faces.dtype)
    net.requires_grad_(False)
    if faces.shape[0] != audio.shape[0]:
        raise ShapeError(f"{faces.shape[0]} face windows vs {audio.shape[0]} audio windows")
    p = losses.cosine_sync_probability(net.encode_face(faces), net.encode_audio(audio), cfg.eps)
    loss = losses.expert_sync(p)
    return loss if as_tensor else float(loss.detach())
