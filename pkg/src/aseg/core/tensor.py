"""Dense tensor with a reverse-mode gradient tape.

Each operation that touches a tensor requiring gradients records its parents
and a backward rule on the output. ``backward`` walks that graph in reverse
topological order. The graph is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""

    def __init__(self, op: str, message: str, expected=None, got=None):
        self.op = op
        self.expected = expected
        self.got = got
        detail = message
        if expected is not None or got is not None:
            detail = f"{message} (expected {expected}, got {got})"
        super().__init__(f"{op}: {detail}")


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Storage is float32 unless a dtype is given explicitly; float64 tensors
    are used by the gradient checker.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = ""
        return t

    @staticmethod
    def zeros(shape, dtype=None) -> "Tensor":
        return Tensor(np.zeros(shape), dtype=dtype)

    @staticmethod
    def ones(shape, dtype=None) -> "Tensor":
        return Tensor(np.ones(shape), dtype=dtype)

    # -- properties -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "tensor is not a scalar", expected=1, got=self.data.size)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic sugar (implemented in functional) ----------------------------

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.mul(F.reciprocal(self), other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor owned by a module. Frozen parameters get no gradient."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op output and record it on the tape when any parent needs gradients."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor._wrap(np.require(data, requirements="C"))
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError("backward", "loss must be a scalar", expected=1, got=loss.data.size)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
