"""Shared test helpers: finite-difference oracles and small fixtures."""

import numpy as np
import pytest


def central_difference(f, x, h=1e-5):
    """Gradient of the scalar function ``f()`` with respect to the array
    ``x`` it closes over, by central differences."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_grad_error(analytic, numeric):
    """Norm-level relative error between two gradient arrays."""
    denom = max(float(np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(np.asarray(analytic) - numeric)) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
