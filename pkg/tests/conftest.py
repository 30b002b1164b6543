import numpy as np
import pytest


def finite_difference_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4):
    """Relative error against the gradient's own scale."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    err = np.abs(analytic - numeric).max() / scale
    assert err <= rtol, f"gradient mismatch: max relative error {err:.3e} > {rtol:.1e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
