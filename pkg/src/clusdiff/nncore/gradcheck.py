from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from clusdiff.errors import NumericError
from clusdiff.nncore.tensor import Tensor

# denominators below this are treated as this (absolute error regime near zero)
REL_FLOOR = 1e-4


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` takes no arguments and must read ``inputs`` (mutated in place while
    probing). Per entry the error is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-4)``.
    With ``max_entries`` set, that many entries per input are probed at random.
    """
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.grad = None
        x.requires_grad = True
    out = fn()
    if out.size != 1:
        raise NumericError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    for x in inputs:
        x.grad = None

    rs = np.random.default_rng(seed)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rs.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite value during finite differencing")
            num = (fp - fm) / (2.0 * eps)
            ana = gflat[i]
            err = abs(ana - num) / max(abs(ana), abs(num), REL_FLOOR)
            worst = max(worst, err)
    return worst
