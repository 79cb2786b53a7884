"""Dense tensors with a reverse-mode autodiff tape.

A :class:`Tensor` wraps a numpy array. Every differentiable op records its
parents and a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from clusdiff.errors import NumericError


class _Flags(threading.local):
    grad_enabled = True
    check_finite = True


_flags = _Flags()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / sampling) on the current thread."""
    prev = _flags.grad_enabled
    _flags.grad_enabled = False
    try:
        yield
    finally:
        _flags.grad_enabled = prev


def grad_enabled() -> bool:
    return _flags.grad_enabled


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _flags.check_finite
    _flags.check_finite = enabled
    try:
        yield
    finally:
        _flags.check_finite = prev


class Tensor:
    """n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    # construction from an op -------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str):
        if _flags.check_finite and not np.isfinite(data).all():
            raise NumericError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _flags.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # basic properties ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # autodiff --------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise NumericError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar ----------------------------------------------------------
    def __add__(self, other):
        from clusdiff.nncore import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from clusdiff.nncore import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from clusdiff.nncore import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from clusdiff.nncore import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from clusdiff.nncore import ops
        if isinstance(other, Tensor):
            return ops.mul(self, ops.reciprocal(other))
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from clusdiff.nncore import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from clusdiff.nncore import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from clusdiff.nncore import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from clusdiff.nncore import ops
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        from clusdiff.nncore import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from clusdiff.nncore import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


_param_counter = itertools.count()


class Param(Tensor):
    """Trainable leaf tensor with a stable identifier for optimizer state."""

    __slots__ = ("id",)

    def __init__(self, data, id: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.id = id if id is not None else f"param{next(_param_counter)}"

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Param({self.id!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topo_order(root: Tensor) -> list:
    """Reverse topological order (root first), iterative to avoid recursion limits."""
    visited = set()
    post: list = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    post.reverse()
    return post


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad = None
