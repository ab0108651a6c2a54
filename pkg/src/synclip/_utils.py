"""Input validation and reproducibility helpers."""
from __future__ import annotations

import contextlib

import numpy as np
import torch

from .exceptions import ShapeError


def check_array(x, ndim, *, name="array", last=None, dtype=np.float32):
    """Validate rank (and optionally trailing dims) of an array-like; returns an ndarray.

    ``last`` is a tuple of expected trailing dimensions, ``None`` entries are wildcards.
    """
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if last is not None:
        tail = arr.shape[-len(last):]
        if any(e is not None and e != g for e, g in zip(last, tail)):
            raise ShapeError(f"{name} trailing dims {tail} != expected {tuple(last)}")
    return arr


def check_same_length(*arrays, names=None):
    lengths = [len(a) for a in arrays]
    if len(set(lengths)) > 1:
        raise ShapeError(f"leading dimensions differ: {dict(zip(names or range(len(lengths)), lengths))}")


def to_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@contextlib.contextmanager
def single_threaded():
    """Run torch on one intra-op thread so float reductions are reproducible bit for bit."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def seed_stream(seed, n):
    """``n`` independent integer seeds split from ``seed``."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def torch_generator(seed) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence(seed).generate_state(1, np.uint64)[0] % (2**63)))
    return g
