"""Gaussian conditional probability paths and their conditional vector fields.

Each path is ``p_t(x | z) = N(x | mu_t(z), sigma_t^2 I)``.  For FM the
conditioning is ``z = x1``; the other paths condition on ``(x0, x1)``.
Times may be scalars or one value per batch row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vfmodel import check_time

KINDS = ("fm", "rectified", "vptrig", "icfm")
DEFAULT_SIGMA = {"fm": 0.01, "icfm": 0.1, "rectified": 0.0, "vptrig": 0.0}


@dataclass(frozen=True)
class PathSpec:
    kind: str
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown path kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", DEFAULT_SIGMA[self.kind])
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind in ("rectified", "vptrig") and self.sigma != 0:
            raise ValueError(f"{self.kind} path has zero variance; sigma must be 0")

    @property
    def zero_variance(self) -> bool:
        """True when sigma_t vanishes identically on [0, 1]."""
        return self.kind in ("rectified", "vptrig") or (self.kind == "icfm" and self.sigma == 0)

    @property
    def needs_source(self) -> bool:
        return self.kind != "fm"


def _col(t: np.ndarray) -> np.ndarray:
    return t[:, None] if t.ndim == 1 else t


def mu_sigma(path: PathSpec, t, x0, x1):
    """Return ``(mu, sigma, dmu/dt, dsigma/dt)``.

    ``mu`` and its derivative have the shape of ``x1``; ``sigma`` and its
    derivative have the shape of ``t``.  ``x0`` is ignored for FM.
    """
    t = check_time(t)
    x1 = np.asarray(x1, dtype=np.float64)
    tc = _col(t) if x1.ndim == 2 else t
    zeros = np.zeros_like(t)
    if path.kind == "fm":
        mu = tc * x1
        dmu = np.broadcast_to(x1, mu.shape).copy()
        sigma = t * path.sigma - t + 1.0
        dsigma = zeros + (path.sigma - 1.0)
        return mu, sigma, dmu, dsigma
    x0 = np.asarray(x0, dtype=np.float64)
    if path.kind in ("rectified", "icfm"):
        mu = tc * x1 + (1.0 - tc) * x0
        dmu = np.broadcast_to(x1 - x0, mu.shape).copy()
        return mu, zeros + path.sigma, dmu, zeros
    # vptrig
    a = 0.5 * math.pi * tc
    mu = np.cos(a) * x0 + np.sin(a) * x1
    dmu = 0.5 * math.pi * (np.cos(a) * x1 - np.sin(a) * x0)
    return mu, zeros, dmu, zeros


def sample_xt(path: PathSpec, t, x0, x1, seed: int | np.random.Generator = 0, eps=None) -> np.ndarray:
    """Draw ``x_t = mu_t + sigma_t * eps`` with ``eps ~ N(0, I)``."""
    mu, sigma, _, _ = mu_sigma(path, t, x0, x1)
    if path.zero_variance:
        return mu
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
    sig = _col(np.asarray(sigma)) if mu.ndim == 2 else sigma
    return mu + sig * eps


def cond_vector_field(path: PathSpec, t, x, x0, x1) -> np.ndarray:
    """Conditional field ``u_t(x | z) = (x - mu) sigma'/sigma + mu'``.

    Paths whose variance vanishes identically use ``u = mu'``.
    """
    mu, sigma, dmu, dsigma = mu_sigma(path, t, x0, x1)
    if path.zero_variance or (path.kind == "icfm"):
        return dmu
    sigma = np.asarray(sigma)
    if np.any(sigma <= 0):
        raise ValueError("conditional field undefined where sigma_t = 0 (FM with sigma_min=0 at t=1)")
    x = np.asarray(x, dtype=np.float64)
    ratio = dsigma / sigma
    if mu.ndim == 2:
        ratio = _col(np.asarray(ratio))
    return (x - mu) * ratio + dmu
