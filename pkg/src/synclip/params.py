"""Named-array parameter sets and their bridge to torch modules."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import ConfigMismatch, ContractViolation


@dataclass
class ParameterSet:
    """Dense arrays of one network keyed by name.

    A frozen set has read-only arrays: any attempt to write through them
    raises, and :meth:`checksum` is stable for its lifetime.
    """

    arrays: dict
    frozen: bool = False
    step_count: int = 0
    kind: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.arrays = {k: np.array(v, copy=True) for k, v in self.arrays.items()}
        if self.frozen:
            self._lock()

    def _lock(self):
        for arr in self.arrays.values():
            arr.flags.writeable = False

    def freeze(self) -> "ParameterSet":
        self.frozen = True
        self._lock()
        return self

    def unfrozen_copy(self) -> "ParameterSet":
        return ParameterSet(self.arrays, frozen=False, step_count=self.step_count,
                            kind=self.kind, config=dict(self.config))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.arrays, frozen=self.frozen, step_count=self.step_count,
                            kind=self.kind, config=dict(self.config))

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        if self.frozen:
            raise ContractViolation(f"cannot assign {name!r}: parameter set is frozen")
        self.arrays[name] = np.array(value, copy=True)

    def names(self) -> set:
        return set(self.arrays)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name])
            h.update(name.encode())
            h.update(arr.dtype.str.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def params_from_module(module: torch.nn.Module, kind: str, config: dict, *, prefix: str = "",
                       step_count: int = 0, frozen: bool = False) -> ParameterSet:
    arrays = {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
    return ParameterSet(arrays, frozen=frozen, step_count=step_count, kind=kind, config=config)


def load_into_module(params: ParameterSet, module: torch.nn.Module, *, prefix: str = "",
                     dtype=None) -> torch.nn.Module:
    """Copy arrays into ``module`` (shapes must match exactly)."""
    state = module.state_dict()
    expected = {prefix + k for k in state}
    got = {k for k in params.arrays if k.startswith(prefix)}
    if expected != got:
        missing, extra = sorted(expected - got), sorted(got - expected)
        raise ConfigMismatch(f"parameter names disagree with network: missing={missing[:5]} extra={extra[:5]}")
    new_state = {}
    for k, ref in state.items():
        arr = params.arrays[prefix + k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ConfigMismatch(f"{prefix + k}: stored shape {arr.shape} != network shape {tuple(ref.shape)}")
        new_state[k] = torch.tensor(np.array(arr), dtype=dtype or ref.dtype)
    module.load_state_dict(new_state)
    return module


def module_matches(params: ParameterSet, module: torch.nn.Module, *, prefix: str = "") -> bool:
    """Bitwise comparison of a module's current tensors against ``params``."""
    for k, v in module.state_dict().items():
        stored = params.arrays[prefix + k]
        current = v.detach().cpu().numpy()
        if current.dtype != stored.dtype:
            current = current.astype(stored.dtype)
        if current.shape != stored.shape or current.tobytes() != np.ascontiguousarray(stored).tobytes():
            return False
    return True
