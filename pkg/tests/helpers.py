"""Finite-difference oracles shared by the test modules."""

import numpy as np


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def one_step_error(path, t, h, n=256, dim=3, seed=0):
    """Max deviation of one Euler step under the conditional field from resampling at ``t + h``."""
    from dualflow.paths import cond_vector_field, sample_xt

    rng = np.random.default_rng(seed)
    x0, x1, eps = rng.normal(size=(n, dim)), rng.normal(size=(n, dim)), rng.normal(size=(n, dim))
    xt = sample_xt(path, t, x0, x1, eps=eps)
    stepped = xt + h * cond_vector_field(path, t, xt, x0, x1)
    return float(np.max(np.abs(stepped - sample_xt(path, t + h, x0, x1, eps=eps))))
