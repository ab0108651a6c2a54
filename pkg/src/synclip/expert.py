"""The expert lip-sync discriminator: encoders, cosine sync probability, BCE training."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from . import losses
from ._utils import check_array, check_same_length, single_threaded, to_tensor
from .corpus import WindowConfig, sample_pair_batch, stack_pairs
from .exceptions import ConfigMismatch, InputTooShort, ShapeError
from .nets import SyncNet
from .params import ParameterSet, load_into_module, params_from_module

EXPERT_KIND = "sync_expert"


@dataclass(frozen=True)
class SyncExpertConfig:
    embed_dim: int = 512
    Tv: int = 5
    widths: tuple = (32, 64, 128, 256, 512)
    audio_widths: tuple = (32, 64, 128, 256, 512)
    eps: float = 1e-8
    use_residual: bool = True
    batch_norm: bool = True
    color_input: bool = True

    def __post_init__(self):
        if self.embed_dim < 8:
            raise ConfigMismatch("embed_dim must be >= 8")
        if not self.eps > 0:
            raise ConfigMismatch("eps must be positive")
        if not self.color_input:
            raise ConfigMismatch("the expert always consumes colour frames")
        if self.Tv < 1 or not self.widths or not self.audio_widths:
            raise ConfigMismatch("Tv >= 1 and non-empty widths required")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "audio_widths", tuple(int(w) for w in self.audio_widths))

    def to_dict(self):
        d = asdict(self)
        d["widths"], d["audio_widths"] = list(self.widths), list(self.audio_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()
                      if k in cls.__dataclass_fields__})


def toy_expert_config(Tv: int = 5, **overrides) -> SyncExpertConfig:
    base = dict(embed_dim=64, Tv=Tv, widths=(16, 32, 64, 64), audio_widths=(16, 32, 64, 64))
    base.update(overrides)
    return SyncExpertConfig(**base)


def build_syncnet(cfg: SyncExpertConfig) -> SyncNet:
    return SyncNet(cfg.Tv, cfg.widths, cfg.audio_widths, cfg.embed_dim, cfg.use_residual, cfg.batch_norm)


def _config_record(cfg: SyncExpertConfig, window: WindowConfig) -> dict:
    return {"expert": cfg.to_dict(), "window": window.to_dict()}


def expert_configs(params: ParameterSet) -> tuple[SyncExpertConfig, WindowConfig]:
    try:
        return SyncExpertConfig.from_dict(params.config["expert"]), WindowConfig.from_dict(params.config["window"])
    except KeyError as exc:
        raise ConfigMismatch(f"parameter set lacks expert config: {exc}") from exc


def init_expert(cfg: SyncExpertConfig, window: WindowConfig, seed=0) -> ParameterSet:
    if cfg.Tv != window.Tv:
        raise ConfigMismatch(f"expert Tv={cfg.Tv} but window Tv={window.Tv}")
    with torch.random.fork_rng():
        torch.manual_seed(int(np.random.SeedSequence(seed).generate_state(1)[0]))
        net = build_syncnet(cfg)
    return params_from_module(net, EXPERT_KIND, _config_record(cfg, window))


def expert_module(params: ParameterSet, dtype=torch.float32) -> SyncNet:
    cfg, _ = expert_configs(params)
    net = load_into_module(params, build_syncnet(cfg), dtype=dtype).to(dtype)
    net.eval()
    return net


def _check_face_input(params, window):
    cfg, wcfg = expert_configs(params)
    arr = check_array(window, 4, name="face window")
    if arr.shape[-1] != 3 * cfg.Tv:
        raise ShapeError(f"face window has {arr.shape[-1]} channels, expected 3*Tv = {3 * cfg.Tv}")
    if arr.shape[1:3] != (wcfg.H // 2, wcfg.W):
        raise ShapeError(f"face window is {arr.shape[1:3]}, expected {(wcfg.H // 2, wcfg.W)}")
    return arr


def _check_audio_input(params, audio):
    _, wcfg = expert_configs(params)
    arr = check_array(audio, 3, name="audio window")
    if arr.shape[1:] != (wcfg.Ta, wcfg.D):
        raise ShapeError(f"audio window is {arr.shape[1:]}, expected {(wcfg.Ta, wcfg.D)}")
    return arr


def encode_face_window(params: ParameterSet, window, net=None) -> np.ndarray:
    """(N, H/2, W, 3*Tv) lower-half windows -> (N, embed_dim) rectified embeddings."""
    arr = _check_face_input(params, window)
    net = net or expert_module(params)
    with torch.no_grad():
        return net.encode_face(to_tensor(arr)).numpy()


def encode_audio_window(params: ParameterSet, audio, net=None) -> np.ndarray:
    """(N, Ta, D) mel windows -> (N, embed_dim) rectified embeddings."""
    arr = _check_audio_input(params, audio)
    net = net or expert_module(params)
    with torch.no_grad():
        return net.encode_audio(to_tensor(arr)).numpy()


def sync_probability(v, s, eps: float = 1e-8):
    """Cosine sync probability of non-negative embeddings; works on single vectors or row batches."""
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if v.shape != s.shape:
        raise ShapeError(f"embedding shapes differ: {v.shape} vs {s.shape}")
    p = losses.cosine_sync_probability(torch.from_numpy(v), torch.from_numpy(s), eps).numpy()
    return float(p) if p.ndim == 0 else p


def expert_bce_loss(p, label, delta: float = losses.DELTA):
    p_t = torch.as_tensor(np.asarray(p, dtype=np.float64))
    y_t = torch.as_tensor(np.asarray(label, dtype=np.float64))
    out = losses.binary_cross_entropy(p_t, y_t, delta).numpy()
    return float(out) if out.ndim == 0 else out


def _predict(net, faces, audio, eps, batch=256):
    out = []
    with torch.no_grad():
        for i in range(0, len(faces), batch):
            v = net.encode_face(to_tensor(faces[i:i + batch]))
            s = net.encode_audio(to_tensor(audio[i:i + batch]))
            out.append(losses.cosine_sync_probability(v, s, eps).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def predict_sync(params: ParameterSet, faces, audio) -> np.ndarray:
    cfg, _ = expert_configs(params)
    faces = _check_face_input(params, faces)
    audio = _check_audio_input(params, audio)
    check_same_length(faces, audio, names=("faces", "audio"))
    return _predict(expert_module(params), faces, audio, cfg.eps)


def off_sync_accuracy(params, eval_pairs, threshold: float = 0.5, predict=None) -> float:
    """Fraction of labelled pairs where ``(P_sync >= threshold) == label``.

    ``predict`` may replace the expert with any ``(faces, audio) -> probabilities`` callable.
    """
    if len(eval_pairs) == 0:
        raise InputTooShort("no evaluation pairs")
    faces, audio, labels = stack_pairs(eval_pairs)
    probs = predict(faces, audio) if predict is not None else predict_sync(params, faces, audio)
    return float(np.mean((np.asarray(probs) >= threshold) == (labels >= 0.5)))


def make_eval_pairs(tracks, mels, window: WindowConfig, seed, n_pairs: int = 400):
    """Balanced held-out pairs for accuracy measurements."""
    return sample_pair_batch(tracks, mels, window, seed, n_pairs)


def train_expert(tracks, mels, window: WindowConfig, cfg: SyncExpertConfig, *, steps: int,
                 batch: int = 64, lr: float = 1e-3, seed=0, init: ParameterSet | None = None,
                 eval_pairs=None, eval_every: int = 0, target_acc: float | None = None,
                 lr_schedule: str | None = None, callback=None):
    """Adam + BCE on balanced in-sync/off-sync batches.

    Returns ``(params, history)``; history holds one dict per step with
    ``step``, ``loss`` and batch ``acc``, plus ``eval_acc`` every ``eval_every`` steps.
    With ``target_acc`` training stops at the first evaluation reaching it.
    ``lr_schedule="cosine"`` anneals the learning rate to zero over ``steps``.
    """
    if not tracks:
        raise InputTooShort("empty corpus")
    if lr_schedule not in (None, "cosine"):
        raise ConfigMismatch(f"unknown lr_schedule {lr_schedule!r}")
    params = init if init is not None else init_expert(cfg, window, seed)
    history = []
    with single_threaded():
        net = load_into_module(params, build_syncnet(cfg))
        net.train()
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1)) if lr_schedule else None
        batch_seeds = np.random.SeedSequence([int(np.random.SeedSequence(seed).generate_state(1)[0]), 1])
        for step, ss in enumerate(batch_seeds.spawn(steps), start=1):
            pairs = sample_pair_batch(tracks, mels, window, ss, batch)
            faces, audio, labels = stack_pairs(pairs)
            v = net.encode_face(to_tensor(faces))
            s = net.encode_audio(to_tensor(audio))
            p = losses.cosine_sync_probability(v, s, cfg.eps)
            y = to_tensor(labels)
            loss = losses.binary_cross_entropy(p, y).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            rec = {"step": step, "loss": float(loss.detach()),
                   "acc": float(((p.detach() >= 0.5).float() == y).float().mean())}
            if eval_pairs is not None and eval_every and step % eval_every == 0:
                net.eval()
                ef, ea, el = stack_pairs(eval_pairs)
                rec["eval_acc"] = float(np.mean((_predict(net, ef, ea, cfg.eps) >= 0.5) == (el >= 0.5)))
                net.train()
            history.append(rec)
            if callback is not None:
                callback(rec)
            if target_acc is not None and rec.get("eval_acc", -1.0) >= target_acc:
                break
    out = params_from_module(net, EXPERT_KIND, _config_record(cfg, window),
                             step_count=params.step_count + len(history))
    return out, history


class SyncExpert(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on a corpus, ``predict_proba`` on stacked windows.

    ``X`` for prediction is a list of :class:`~synclip.corpus.SyncPair` or a tuple
    ``(faces, audio)`` of stacked arrays.
    """

    def __init__(self, window=None, expert_config=None, n_steps=1000, batch_size=64,
                 learning_rate=1e-3, random_state=0, threshold=0.5):
        self.window = window
        self.expert_config = expert_config
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state
        self.threshold = threshold

    def fit(self, tracks, mels, eval_pairs=None, eval_every=0):
        window = self.window or WindowConfig()
        cfg = self.expert_config or SyncExpertConfig(Tv=window.Tv)
        self.params_, self.history_ = train_expert(
            tracks, mels, window, cfg, steps=self.n_steps, batch=self.batch_size,
            lr=self.learning_rate, seed=self.random_state, eval_pairs=eval_pairs, eval_every=eval_every)
        self.classes_ = np.array([0, 1])
        return self

    @classmethod
    def from_params(cls, params: ParameterSet, **kwargs):
        cfg, window = expert_configs(params)
        est = cls(window=window, expert_config=cfg, **kwargs)
        est.params_ = params
        est.history_ = []
        est.classes_ = np.array([0, 1])
        return est

    def freeze(self):
        self.params_.freeze()
        return self

    def _split(self, X):
        if isinstance(X, tuple):
            return X[0], X[1]
        faces, audio, _ = stack_pairs(X)
        return faces, audio

    def predict_proba(self, X):
        p = predict_sync(self.params_, *self._split(X))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)

    def score(self, X, y=None):
        if y is None:
            return off_sync_accuracy(self.params_, X, self.threshold)
        return float(np.mean(self.predict(X) == np.asarray(y)))
