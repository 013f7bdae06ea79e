"""Parameter initializers and small layer helpers built on the primitive ops."""

from __future__ import annotations

import numpy as np

from . import ops
from .params import ParamSet
from .tensor import Tensor, default_dtype


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    """Gaussian with std sqrt(2 / fan_in), for layers followed by ReLU."""
    dtype = dtype or default_dtype()
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    """Glorot uniform, for layers followed by sigmoid / tanh."""
    dtype = dtype or default_dtype()
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def add_dense(params: ParamSet, name: str, n_in: int, n_out: int, rng, init: str = "he") -> None:
    if init == "he":
        w = he_normal(rng, (n_in, n_out), n_in)
    elif init == "xavier":
        w = xavier_uniform(rng, (n_in, n_out), n_in, n_out)
    elif init == "zeros":
        w = np.zeros((n_in, n_out), dtype=default_dtype())
    else:
        raise ValueError(f"unknown init {init!r}")
    params.add(f"{name}.w", w)
    params.add(f"{name}.b", np.zeros(n_out, dtype=default_dtype()))


def add_batch_norm(params: ParamSet, name: str, channels: int) -> None:
    dt = default_dtype()
    params.add(f"{name}.gamma", np.ones(channels, dtype=dt))
    params.add(f"{name}.beta", np.zeros(channels, dtype=dt))
    params.add(f"{name}.running_mean", np.zeros(channels, dtype=dt), trainable=False)
    params.add(f"{name}.running_var", np.ones(channels, dtype=dt), trainable=False)


def dense(params: ParamSet, name: str, x: Tensor) -> Tensor:
    return ops.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def batch_norm(params: ParamSet, name: str, x: Tensor, training: bool) -> Tensor:
    return ops.batch_norm(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        params[f"{name}.running_mean"],
        params[f"{name}.running_var"],
        training=training,
    )
