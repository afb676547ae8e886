"""Sample-quality and normalisation diagnostics used by scripts and tests."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .divergence import TraceEstimator
from .odeint import SolverConfig, log_density
from .vfmodel import GaussianPrior


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared energy distance ``2 E|A-B| - E|A-A'| - E|B-B'|`` (V-statistic)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def grid_points(lo: float, hi: float, n: int) -> tuple[np.ndarray, float]:
    """Cell-centred ``n x n`` grid over ``[lo, hi]^2`` and the cell area."""
    h = (hi - lo) / n
    centers = lo + h * (np.arange(n) + 0.5)
    gx, gy = np.meshgrid(centers, centers, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1), h * h


def grid_density(field, prior: GaussianPrior, lo: float = -3.0, hi: float = 3.0, n: int = 100,
                 solver: SolverConfig | None = None,
                 estimator: TraceEstimator | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Densities on a 2-D grid; returns ``(points, density, cell_area)``."""
    solver = solver or SolverConfig("dopri5", atol=1e-5, rtol=1e-5)
    estimator = estimator or TraceEstimator(kind="exact")
    pts, area = grid_points(lo, hi, n)
    logp, _ = log_density(field, prior, pts, solver, estimator)
    return pts, np.exp(logp), area
