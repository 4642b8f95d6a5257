import numpy as np
import pytest


def central_diff(f, arrays, names, h=1e-5):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. each named array."""
    out = {}
    for name in names:
        base = arrays[name]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            g[idx] = (f({**arrays, name: plus}) - f({**arrays, name: minus})) / (2 * h)
        out[name] = g
    return out


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-6):
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = float(np.max(err / scale)) if err.size else 0.0
    assert np.all((err <= floor) | (err / scale < rel)), f"worst relative error {worst:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
