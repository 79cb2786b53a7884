"""Minimal deterministic tensor / autodiff / optimizer substrate."""

import clusdiff.parallel  # noqa: F401  (pins BLAS threads)
from clusdiff.nncore import ops
from clusdiff.nncore.gradcheck import grad_check
from clusdiff.nncore.io import load_tensor, read_tensor, save_tensor, write_tensor
from clusdiff.nncore.layers import Conv1x1, Conv2d, Embedding, GroupNorm, Linear, Module
from clusdiff.nncore.optim import AdamState, adam_step
from clusdiff.nncore.rng import Rng
from clusdiff.nncore.tensor import Param, Tensor, finite_checks, no_grad

__all__ = [
    "AdamState", "Conv1x1", "Conv2d", "Embedding", "GroupNorm", "Linear", "Module",
    "Param", "Rng", "Tensor", "adam_step", "finite_checks", "grad_check", "load_tensor",
    "no_grad", "ops", "read_tensor", "save_tensor", "write_tensor",
]
