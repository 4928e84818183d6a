import numpy as np
import pytest

from metacam import diffcore as dc


def central_fd(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def scalar_of(loss_fn, layout):
    """Plain-float evaluation of a block-taking loss function at flat values."""

    def f(values):
        with dc.no_grad():
            return float(dc.as_tensor(loss_fn(layout.unpack(dc.Tensor(values)))).value)

    return f


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def unit_rows(rng, n, d):
    M = rng.normal(size=(n, d))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
