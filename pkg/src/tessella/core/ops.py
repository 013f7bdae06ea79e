"""Differentiable primitive kernels.

Each function takes Tensors (or array-likes, treated as constants) and returns a
Tensor whose backward closure produces one gradient per parent.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "linear", "conv2d", "max_pool2d",
    "global_avg_pool", "concat", "stack_rows", "relu", "sigmoid", "tanh", "softplus", "exp", "log",
    "softmax", "log_softmax", "logsumexp", "l2_normalize", "batch_norm", "sum", "mean",
    "reshape", "transpose", "getitem", "take", "topk", "bottomk",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-D matrix product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (B, H, W, C), ``w`` is (kh, kw, C, O); zero padding on both sides.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    B, H, W, C = x.shape
    kh, kw, wc, O = w.shape
    if wc != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {wc}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = _pad_hw(x.data, padding)
    if kh == stride and kw == stride and Hp % stride == 0 and Wp % stride == 0:
        # non-overlapping patches: im2col is a pure reshape
        cols = xp.reshape(B, Ho, kh, Wo, kw, C).transpose(0, 1, 3, 2, 4, 5)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, Hp-kh+1, Wp-kw+1, C, kh, kw
        cols = win[:, ::stride, ::stride].transpose(0, 1, 2, 4, 5, 3)
    cols = np.ascontiguousarray(cols).reshape(B * Ho * Wo, kh * kw * C)
    wmat = w.data.reshape(kh * kw * C, O)
    out = (cols @ wmat).reshape(B, Ho, Wo, O)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(B * Ho * Wo, O)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            dxp = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, padding:padding + H, padding:padding + W, :] if padding else dxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, bw, "conv2d", saved=(cols,))


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (kernel = stride = ``size``); trailing rows/cols dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"max_pool2d: input {H}x{W} smaller than pool size {size}")
    xc = x.data[:, :Ho * size, :Wo * size, :]
    blocks = xc.reshape(B, Ho, size, Wo, size, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, Ho, Wo, C, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(B, Ho * size, Wo * size, C)
        if Ho * size == H and Wo * size == W:
            return (gb,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :Ho * size, :Wo * size, :] = gb
        return (gx,)

    return make_node(out, (x,), bw, "max_pool2d", saved=(arg,))


def global_avg_pool(x) -> Tensor:
    """(B, H, W, C) -> (B, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, None, None, :] / (H * W), x.shape).copy(),)

    return make_node(x.data.mean(axis=(1, 2)), (x,), bw, "global_avg_pool")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return np.split(g, sizes, axis=axis)

    return make_node(out, ts, bw, "concat")


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor."""
    ts = [reshape(as_tensor(t), (1, -1)) for t in tensors]
    return concat(ts, axis=0)


# -- nonlinearities -------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return make_node(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = as_tensor(x)
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return make_node(out, (x,), lambda g: (g * _sigmoid(z),), "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return make_node(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    p = e / s

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * p,)

    return make_node(out if keepdims else np.squeeze(out, axis=axis), (x,), bw, "logsumexp")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def l2_normalize(x, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Scale slices along ``axis`` to unit L2 norm.

    Zero slices map to zero and are reported in the returned boolean flag array.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    zero = norm == 0
    safe = np.where(zero, 1, norm)
    y = np.where(zero, 0, x.data / safe).astype(x.dtype)

    def bw(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(zero, 0, gx).astype(g.dtype),)

    return make_node(y, (x,), bw, "l2_normalize"), np.squeeze(zero, axis=axis)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis but the last (channel) axis.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential averaging with ``momentum``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} do not match {C} channels")
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in axes]))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / max(m - 1, 1))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mu = running_mean.data.astype(x.dtype)
        var = running_var.data.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx.astype(g.dtype), gg, gb

    return make_node(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")


# -- reductions and shape manipulation -----------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_node(np.array(out, dtype=x.dtype), (x,), bw, "getitem")


def take(x, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with ``np.take_along_axis`` semantics; gradient scatters back."""
    x = as_tensor(x)
    indices = np.asarray(indices)
    out = np.take_along_axis(x.data, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        if indices.ndim == 1:
            np.add.at(gx, indices, g)
        else:
            # add.at along an arbitrary axis via index tuple
            idx = list(np.indices(indices.shape, sparse=True))
            idx[axis] = indices
            np.add.at(gx, tuple(idx), g)
        return (gx,)

    return make_node(out, (x,), bw, "take")


def _select_order(data: np.ndarray, axis: int, largest: bool) -> np.ndarray:
    key = -data if largest else data
    return np.argsort(key, axis=axis, kind="stable")


def topk(x, k: int, axis: int = 0) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` values along ``axis`` in descending order; ties go to the lower index."""
    x = as_tensor(x)
    if not 1 <= k <= x.shape[axis]:
        raise ShapeError(f"topk: k={k} out of range for axis of length {x.shape[axis]}")
    idx = np.take(_select_order(x.data, axis, True), np.arange(k), axis=axis)
    return take(x, idx, axis=axis), idx


def bottomk(x, k: int, axis: int = 0) -> tuple[Tensor, np.ndarray]:
    """Smallest ``k`` values along ``axis`` in ascending order; ties go to the lower index."""
    x = as_tensor(x)
    if not 1 <= k <= x.shape[axis]:
        raise ShapeError(f"bottomk: k={k} out of range for axis of length {x.shape[axis]}")
    idx = np.take(_select_order(x.data, axis, False), np.arange(k), axis=axis)
    return take(x, idx, axis=axis), idx
