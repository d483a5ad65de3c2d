import numpy as np
import pytest

from tempex import autodiff as ad


def finite_difference_grad(fn, x, h=1e-5):
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def analytic_grad(build, x):
    """Gradient of the scalar produced by `build` (Tensor -> Tensor)."""
    leaf = ad.Tensor(np.asarray(x, dtype=np.float64).copy(),
                     requires_grad=True)
    with ad.Tape():
        out = build(leaf)
        out.backward()
    return leaf.grad


def assert_gradcheck(build, x, rtol=1e-4, h=1e-5):
    got = analytic_grad(build, x)

    def scalar_fn(arr):
        with_no_tape = build(ad.Tensor(arr))
        return float(with_no_tape.data)

    want = finite_difference_grad(scalar_fn, np.asarray(x, dtype=np.float64),
                                  h=h)
    denom = np.maximum(np.abs(want), 1.0)
    err = np.max(np.abs(got - want) / denom)
    assert err < rtol, f"gradcheck failed: max rel err {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
