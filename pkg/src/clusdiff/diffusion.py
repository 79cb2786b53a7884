"""Noise schedules, closed-form forward noising, and ancestral sampling.

Step indices are 1-based throughout: ``beta[t]`` for ``t = 1..T`` lives at
array position ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from clusdiff.errors import ConfigError, RangeError, ShapeError
from clusdiff.nncore import Rng, Tensor, ops

DEFAULT_T = 200
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t) -> None:
        tt = np.asarray(t)
        if tt.size and (tt.min() < 1 or tt.max() > self.T):
            raise RangeError(f"step {t} outside [1, {self.T}]")

    def coeffs(self, t) -> Dict[str, np.ndarray]:
        self.check_step(t)
        i = np.asarray(t) - 1
        return {"beta": self.beta[i], "alpha": self.alpha[i], "alpha_bar": self.alpha_bar[i]}

    def as_arrays(self) -> Dict[str, np.ndarray]:
        return {"beta": self.beta, "alpha": self.alpha, "alpha_bar": self.alpha_bar}

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("schedule needs at least one step")
        if not ((beta > 0) & (beta < 1)).all():
            raise ConfigError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def make_linear_schedule(
    T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END
) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule.from_betas(beta)


def _bcast(coef: np.ndarray, x: np.ndarray, batched: bool) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if batched and coef.ndim == 1:
        return coef.reshape((-1,) + (1,) * (x.ndim - 1))
    return coef


def forward_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    ``t`` may be a scalar or one step per leading-axis sample.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    abar = sched.coeffs(t)["alpha_bar"]
    batched = np.ndim(t) == 1
    a = _bcast(np.sqrt(abar), x0, batched)
    b = _bcast(np.sqrt(1.0 - abar), x0, batched)
    return (a * x0 + b * eps).astype(x0.dtype, copy=False)


def forward_step(x_prev, t, noise, sched: NoiseSchedule) -> np.ndarray:
    """One step of q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    beta = sched.coeffs(t)["beta"]
    return np.sqrt(1.0 - beta) * np.asarray(x_prev) + np.sqrt(beta) * np.asarray(noise)


def denoise_loss(eps_pred: Tensor, eps) -> Tensor:
    """Mean squared error between predicted and injected noise."""
    return ops.mse(eps_pred, eps)


def reverse_step(x_t, t: int, eps_pred, sched: NoiseSchedule, noise=None) -> np.ndarray:
    """Ancestral step x_t -> x_{t-1} with sigma_t^2 = beta_t (sigma_1 = 0)."""
    c = sched.coeffs(t)
    x_t = np.asarray(x_t)
    mean = (x_t - (c["beta"] / np.sqrt(1.0 - c["alpha_bar"])) * np.asarray(eps_pred)) / np.sqrt(c["alpha"])
    if t > 1:
        if noise is None:
            raise ShapeError("reverse_step needs noise for t > 1")
        mean = mean + np.sqrt(c["beta"]) * np.asarray(noise)
    return mean.astype(x_t.dtype, copy=False)


Denoiser = Callable[[np.ndarray, np.ndarray, object], np.ndarray]


def sample_loop(
    denoiser: Denoiser,
    cond,
    sched: NoiseSchedule,
    rng: Rng,
    shape,
    dtype=np.float64,
    stream_ids: Optional[list] = None,
) -> np.ndarray:
    """Run the reverse chain from x_T ~ N(0, I) down to x_0.

    ``shape`` is ``[n, ...]``; every one of the ``n`` chains draws its
    initial noise and per-step noise from its own stream ``rng.child(id)``,
    so a chain's result does not depend on which other chains share its batch.
    ``denoiser(x_t, t_vec, cond)`` returns the predicted noise.
    """
    shape = tuple(shape)
    n = shape[0]
    ids = list(range(n)) if stream_ids is None else list(stream_ids)
    if len(ids) != n:
        raise ShapeError(f"{len(ids)} stream ids for {n} chains")
    gens = [rng.child(i).generator() for i in ids]
    per = shape[1:]
    x = np.stack([g.standard_normal(per) for g in gens]).astype(dtype) if n else np.zeros(shape, dtype)
    if n == 0:
        return x
    for t in range(sched.T, 0, -1):
        eps_pred = np.asarray(denoiser(x, np.full(n, t), cond))
        if eps_pred.shape != x.shape:
            raise ShapeError(f"denoiser returned {eps_pred.shape}, expected {x.shape}")
        noise = np.stack([g.standard_normal(per) for g in gens]).astype(dtype) if t > 1 else None
        x = reverse_step(x, t, eps_pred, sched, noise)
    return x


def save_schedule(path, sched: NoiseSchedule) -> None:
    from clusdiff.nncore.io import save_named

    save_named(path, sched.as_arrays())


def load_schedule(path) -> NoiseSchedule:
    from clusdiff.nncore.io import load_named

    return NoiseSchedule.from_betas(load_named(path)["beta"])
