"""Checkpoint files: a named-array container plus a manifest in its metadata.

Manifest keys: ``format`` (``"synclip-checkpoint"``), ``checkpoint_version``,
``kind`` (``sync_expert`` | ``generator`` | ``quality_disc``), ``config``,
``step_count`` and ``frozen``. Loading rebuilds the network described by
``config`` and rejects any array whose name or shape disagrees with it.
"""
from __future__ import annotations

from . import container
from .corpus import WindowConfig
from .exceptions import ConfigMismatch, FormatError
from .params import ParameterSet

CHECKPOINT_VERSION = 1
_FORMAT = "synclip-checkpoint"


def save_checkpoint(params: ParameterSet, config: dict | None, path) -> None:
    config = params.config if config is None else config
    meta = {"format": _FORMAT, "checkpoint_version": CHECKPOINT_VERSION, "kind": params.kind,
            "config": config, "step_count": int(params.step_count), "frozen": bool(params.frozen)}
    container.save(path, params.arrays, meta)


def _reference_shapes(kind: str, config: dict) -> dict:
    if kind == "sync_expert":
        from .expert import SyncExpertConfig, build_syncnet
        net = build_syncnet(SyncExpertConfig.from_dict(config["expert"]))
    elif kind == "generator":
        from .generator import GeneratorConfig, build_generator
        net = build_generator(GeneratorConfig.from_dict(config["generator"]))
    elif kind == "quality_disc":
        from .gan import QualityDiscConfig, build_disc
        net = build_disc(QualityDiscConfig.from_dict(config["disc"]))
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    return {k: tuple(v.shape) for k, v in net.state_dict().items()}


def load_checkpoint(path, expect_kind: str | None = None, runtime_window: WindowConfig | None = None):
    """Returns ``(params, config)``; nothing is returned unless every check passes."""
    arrays, meta = container.load(path)
    if meta.get("format") != _FORMAT:
        raise FormatError(f"{path}: not a synclip checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {meta.get('checkpoint_version')} "
                          f"unsupported (expected {CHECKPOINT_VERSION})")
    kind, config = meta.get("kind"), meta.get("config") or {}
    if expect_kind is not None and kind != expect_kind:
        raise ConfigMismatch(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    try:
        reference = _reference_shapes(kind, config)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigMismatch(f"{path}: config cannot build a network: {exc}") from exc
    if set(reference) != set(arrays):
        raise ConfigMismatch(f"{path}: array names do not match the configured network")
    for name, shape in reference.items():
        if tuple(arrays[name].shape) != shape:
            raise ConfigMismatch(f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}")
    if runtime_window is not None and "window" in config:
        stored = WindowConfig.from_dict(config["window"])
        if stored != runtime_window:
            diff = {k: (getattr(stored, k), getattr(runtime_window, k)) for k in stored.to_dict()
                    if getattr(stored, k) != getattr(runtime_window, k)}
            raise ConfigMismatch(f"{path}: checkpoint window config differs from runtime: {diff}")
    params = ParameterSet(arrays, frozen=bool(meta.get("frozen")), step_count=int(meta.get("step_count", 0)),
                          kind=kind, config=config)
    return params, config
