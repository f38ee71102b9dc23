import numpy as np
import pytest

from selfcomp.network import build_cifar_net


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_net():
    """Small full-topology network for fast structural tests."""
    return build_cifar_net(widths=[4, 8, 16, 32], seed=7)


def finite_difference(f, x, h=1e-3):
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        grad_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
