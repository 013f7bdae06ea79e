"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. Calling
:func:`backward` walks that record in reverse topological order.

Image tensors use NHWC layout throughout.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "as_tensor",
    "no_grad",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, message: str, node_id: int | None = None):
        self.node_id = node_id
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


class precision:
    """Context manager switching the default float dtype (e.g. float64 for gradient checks)."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)

    def __enter__(self):
        self._prev = default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._prev)


class no_grad:
    """Disable graph recording inside the block."""

    def __enter__(self):
        self._prev = _get("grad_enabled", True)
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


def _recorder():
    return _get("recorder", None)


class Tensor:
    """An n-dimensional float array plus the record needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "node_id", "saved")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.node_id: int | None = None
        self.saved: tuple = ()

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
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

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    dtype = default_dtype() if dtype is None else dtype
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(default_dtype())
    return Tensor(arr)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
    saved: tuple = (),
) -> Tensor:
    """Wrap an op result; records parents only when some parent needs a gradient."""
    out = Tensor(data)
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.saved = saved
    rec = _recorder()
    if rec is not None:
        rec.record(out, parents, op, saved)
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf with requires_grad."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
