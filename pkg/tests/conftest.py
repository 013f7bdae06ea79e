import numpy as np
import pytest

from tessella.core import Tensor, no_grad, precision


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x (x is modified in place and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_op_grad(build, arrays, tol=1e-6, h=1e-5):
    """Compare backward() of ``sum(build(*tensors) * probe)`` against finite differences."""
    with precision(np.float64):
        ts = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = build(*ts)
        rng = np.random.default_rng(1)
        probe = rng.standard_normal(out.shape)
        loss = (out * probe).sum()
        loss.backward()
        for t in ts:
            def f():
                with no_grad():
                    return float((build(*ts).data * probe).sum())
            num = numeric_grad(f, t.data, h)
            scale = max(np.abs(num).max(), 1e-8)
            err = np.abs(t.grad - num).max() / scale
            assert err < tol, f"relative error {err}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
