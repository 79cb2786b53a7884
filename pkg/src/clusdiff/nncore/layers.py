"""Parameterised layers built from :mod:`clusdiff.nncore.ops`."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from clusdiff.errors import ConfigError
from clusdiff.nncore import ops
from clusdiff.nncore.rng import Rng
from clusdiff.nncore.tensor import Param, Tensor


class Module:
    """Container that discovers parameters and submodules through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Param]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Param):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Param]:
        return [p for _, p in self.named_parameters()]

    def assign_ids(self, prefix: str = "") -> None:
        """Make optimizer ids equal to dotted attribute paths (stable across runs)."""
        for name, p in self.named_parameters(prefix):
            p.id = name

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: Rng, shape, bound: float, dtype) -> np.ndarray:
    return rng.generator().uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, dtype=np.float64, zero: bool = False):
        bound = 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out), dtype) if zero else _uniform(rng.child("w"), (d_in, d_out), bound, dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(d_out, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class Conv2d(Module):
    """3x3, padding 1, stride 1 or 2."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, stride: int = 1, dtype=np.float64, zero: bool = False):
        bound = 1.0 / math.sqrt(c_in * 9)
        shape = (c_out, c_in, 3, 3)
        k = np.zeros(shape, dtype) if zero else _uniform(rng.child("k"), shape, bound, dtype)
        self.k = Param(k)
        self.b = Param(np.zeros(c_out, dtype))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.k, self.b, stride=self.stride)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, dtype=np.float64):
        bound = 1.0 / math.sqrt(c_in)
        self.w = Param(_uniform(rng.child("w"), (c_out, c_in), bound, dtype))
        self.b = Param(np.zeros(c_out, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.w, self.b)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, dtype=np.float64):
        if groups <= 0 or channels % groups:
            raise ConfigError(f"{groups} groups do not divide {channels} channels")
        self.groups = groups
        self.gain = Param(np.ones(channels, dtype))
        self.bias = Param(np.zeros(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: Rng, dtype=np.float64):
        self.table = Param(rng.child("table").normal((num, dim), dtype))

    def forward(self, idx) -> Tensor:
        return ops.take_rows(self.table, idx)
