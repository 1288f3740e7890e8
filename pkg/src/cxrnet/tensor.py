"""Dense float32 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`cxrnet.functional`
record an :class:`OpNode` on their output holding the parent tensors and a
closure that maps the output gradient to parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks the graph once in reverse
topological order and accumulates gradients into leaf tensors only.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from cxrnet.errors import ShapeError, UsageError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, frozen feature extraction)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class OpNode:
    kind: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    """N-dimensional float32 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if any(d < 0 for d in arr.shape):
            raise ShapeError(f"negative dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from cxrnet import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from cxrnet import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from cxrnet import functional as F

        return F.add(self, F.mul(other, -1.0))

    def __neg__(self):
        from cxrnet import functional as F

        return F.mul(self, -1.0)

    def sum(self):
        from cxrnet import functional as F

        return F.sum(self)

    def mean(self):
        from cxrnet import functional as F

        return F.mean(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _not_scalar(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, kind: str, inputs: Sequence[Tensor], backward_fn, **saved) -> Tensor:
    """Wrap ``data`` as an op output, recording the graph edge when any input tracks gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = None
    tracked = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = tracked
    out.node = OpNode(kind, tuple(inputs), backward_fn, saved) if tracked else None
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in reversed(t.node.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Intermediate gradients live only for the duration of the call. Repeated
    calls accumulate into leaves.
    """
    if grad is None:
        if root.data.size != 1:
            raise UsageError(f"backward() without an explicit gradient needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    else:
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != root.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} does not match root shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("backward() called on a tensor that does not require grad")

    pending: dict[int, np.ndarray] = {id(root): grad}
    for t in reversed(_topological_order(root)):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.astype(DTYPE, copy=True) if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{t.node.kind} backward produced gradient {pg.shape} for input of shape {parent.shape}"
                )
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
