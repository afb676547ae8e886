"""Divergence ``Tr(dv/dx)`` of a vector field: exact and Hutchinson estimates.

Fields are callables ``field(t, x: Variable) -> Variable`` acting row-wise on
a batch.  Row independence is what lets the exact trace and multi-probe
estimates run as a single pass over a replicated batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Variable

MAX_EXACT_DIM = 512
PROBE_DISTS = ("rademacher", "gaussian")


@dataclass(frozen=True)
class TraceEstimator:
    kind: str = "hutchinson"
    probes: int = 1
    probe_dist: str = "rademacher"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "hutchinson"):
            raise ValueError(f"unknown trace estimator {self.kind!r}")
        if self.probes < 1:
            raise ValueError("num_probes must be >= 1")
        if self.probe_dist not in PROBE_DISTS:
            raise ValueError(f"unknown probe distribution {self.probe_dist!r}")


EXACT = TraceEstimator(kind="exact")


def draw_probes(rng: np.random.Generator, shape, dist: str = "rademacher") -> np.ndarray:
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    return rng.standard_normal(shape)


def _tile_time(t, reps: int):
    t = np.asarray(t, dtype=np.float64)
    return t if t.ndim == 0 else np.tile(t, reps)


def _check_exact_dim(d: int) -> None:
    if d > MAX_EXACT_DIM:
        raise ValueError(
            f"exact trace needs {d} VJP passes (limit {MAX_EXACT_DIM}); use the Hutchinson estimator"
        )


def _replicated_vjp(field, t, x: np.ndarray, vecs: np.ndarray):
    """Evaluate ``field`` once on ``k`` stacked copies of ``x`` and pull back ``vecs``.

    ``vecs`` has shape (k, n, D).  Returns ``(v(t, x), vecs[i]^T J)`` stacked
    as (k, n, D).
    """
    k, n, d = vecs.shape
    with dc.Tape():
        xv = Variable(np.tile(x, (k, 1)), requires_grad=True)
        out = field(_tile_time(t, k), xv)
        flat = vecs.reshape(k * n, d)
        (g,) = dc.grad(dc.sum(dc.mul(out, flat)), [xv])
    return out.value[:n], g.reshape(k, n, d)


def field_and_trace(field, t, x, estimator: TraceEstimator, probe: np.ndarray | None = None,
                    rng: np.random.Generator | None = None):
    """Return ``(v(t, x), trace estimate)`` from one batched forward/backward pass.

    For Hutchinson, ``probe`` (shape (probes, n, D)) is used when given,
    otherwise drawn from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if estimator.kind == "exact":
        _check_exact_dim(d)
        basis = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d))
        v, rows = _replicated_vjp(field, t, x, basis)
        return v, np.einsum("knk->n", rows)
    if probe is None:
        rng = rng if rng is not None else np.random.default_rng(estimator.seed)
        probe = draw_probes(rng, (estimator.probes, n, d), estimator.probe_dist)
    v, rows = _replicated_vjp(field, t, x, probe)
    return v, np.einsum("knd,knd->kn", rows, probe).mean(axis=0)


def exact_trace(field, t, x) -> np.ndarray:
    """Exact ``Tr(dv/dx)`` per row via D basis-vector VJPs."""
    return field_and_trace(field, t, x, EXACT)[1]


def hutchinson_samples(field, t, x, estimator: TraceEstimator,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-probe estimates ``eps^T J eps``; shape (probes, n)."""
    x = np.asarray(x, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(estimator.seed)
    probe = draw_probes(rng, (estimator.probes,) + x.shape, estimator.probe_dist)
    _, rows = _replicated_vjp(field, t, x, probe)
    return np.einsum("knd,knd->kn", rows, probe)


def hutchinson_trace(field, t, x, estimator: TraceEstimator,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Mean of ``estimator.probes`` Hutchinson samples per row."""
    return hutchinson_samples(field, t, x, estimator, rng).mean(axis=0)


def tangent_trace(field, t, x: Variable, estimator: TraceEstimator,
                  rng: np.random.Generator | None = None) -> tuple[Variable, Variable]:
    """Differentiable ``(v, trace)`` built from forward tangents (``field.jvp``).

    Everything is recorded on the active tape with first-order primitives, so
    backward through the result reaches the field's parameters.
    """
    n, d = x.shape
    if estimator.kind == "exact":
        _check_exact_dim(d)
        k = d
        tangents = np.repeat(np.eye(d), n, axis=0)
    else:
        k = estimator.probes
        rng = rng if rng is not None else np.random.default_rng(estimator.seed)
        tangents = draw_probes(rng, (k * n, d), estimator.probe_dist)
    xk = x if k == 1 else dc.concat([x] * k, axis=0)
    out, ju = field.jvp(_tile_time(t, k), xk, tangents)
    per_row = dc.sum(dc.mul(ju, tangents), axis=1)
    total = dc.slice_(per_row, slice(0, n))
    for i in range(1, k):
        total = dc.add(total, dc.slice_(per_row, slice(i * n, (i + 1) * n)))
    if estimator.kind == "hutchinson" and k > 1:
        total = dc.mul(total, 1.0 / k)
    v = out if k == 1 else dc.slice_(out, slice(0, n))
    return v, total
