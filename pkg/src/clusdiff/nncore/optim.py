from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from clusdiff.errors import StateError
from clusdiff.nncore.tensor import Param


@dataclass
class AdamState:
    """Per-parameter moments plus hyperparameters for Adam."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Iterable[Param], **hyper) -> "AdamState":
        state = cls(**hyper)
        for p in params:
            state.register(p)
        return state

    def register(self, p: Param) -> None:
        if p.id in self.m:
            raise StateError(f"duplicate param id {p.id!r}")
        self.m[p.id] = np.zeros_like(p.data)
        self.v[p.id] = np.zeros_like(p.data)


def adam_step(params: List[Param], state: AdamState) -> None:
    """Bias-corrected Adam update in place, then zero every gradient.

    A param with no gradient (unused in the graph) is treated as having a
    zero gradient.
    """
    for p in params:
        if p.id not in state.m:
            raise StateError(f"no optimizer state for param {p.id!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[p.id]
        v = state.v[p.id]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
        p.grad = None
