"""Fixed-step Euler and adaptive Dormand-Prince integration of flows.

The augmented system integrates ``dx/dt = v(t, x)`` together with
``d(delta_logp)/dt = -Tr(dv/dx)``.  Traversing ``t_start -> t_end`` gives

    log p_{t_end}(x_end) = log p_{t_start}(x_start) + delta_logp

so the data log-density of a point ``x`` (at t=1) is
``log p0(x0) - delta_logp`` after integrating 1 -> 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .divergence import TraceEstimator, draw_probes, field_and_trace
from .vfmodel import GaussianPrior

METHODS = ("euler", "dopri5")

# Dormand-Prince 5(4) tableau.
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

_SAFETY = 0.9
_PI_BETA = 0.04
_PI_ALPHA = 0.2 - 0.75 * _PI_BETA
_MIN_FACTOR, _MAX_FACTOR = 0.2, 10.0
_MIN_STEP = 1e-6


class SolverError(RuntimeError):
    def __init__(self, message: str, t: float):
        self.t = t
        super().__init__(f"{message} (last t reached: {t:.6g})")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    steps: int = 4
    atol: float = 1e-1
    rtol: float = 1e-2
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver {self.method!r}; expected one of {METHODS}")
        if self.steps < 1:
            raise ValueError("euler steps must be >= 1")
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("atol and rtol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def tag(self) -> str:
        """``F`` for fixed-step, ``V`` for variable-step."""
        return "F" if self.method == "euler" else "V"


@dataclass
class AugmentedState:
    x: np.ndarray
    delta_logp: np.ndarray
    nfe: int = 0


class _Counted:
    """Wraps a right-hand side, counts calls, and turns bad values into SolverError."""

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray]):
        self.fn = fn
        self.nfe = 0

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        self.nfe += 1
        try:
            out = self.fn(t, y)
        except dc.NonFiniteError as err:
            raise SolverError(f"field evaluation failed: {err}", t) from err
        if isinstance(out, dc.Variable):
            out = out.value
        if not np.all(np.isfinite(out)):
            raise SolverError("field returned NaN or Inf", t)
        return out


def _euler(rhs, y, t0, t1, steps, begin_step):
    h = (t1 - t0) / steps
    for k in range(steps):
        begin_step()
        y = y + h * rhs(t0 + k * h, y)
    return y


def _dopri5(rhs, y, t0, t1, cfg: SolverConfig, begin_step):
    span = t1 - t0
    if span == 0:
        return y
    direction = math.copysign(1.0, span)
    h_max = abs(span)
    h = h_max / 10.0
    t = t0
    begin_step()
    k1 = rhs(t, y)
    err_prev = 1.0
    attempts = 0
    while direction * (t1 - t) > 1e-12 * h_max:
        if attempts >= cfg.max_steps:
            raise SolverError(f"dopri5 exceeded max_steps={cfg.max_steps}", t)
        attempts += 1
        h = min(h, abs(t1 - t))
        dt = direction * h
        begin_step()
        ks = [k1]
        for i in range(1, 7):
            yi = y + dt * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
            ks.append(rhs(t + _C[i] * dt, yi))
        y_new = y + dt * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err = dt * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        ratio = float(np.sqrt(np.mean((err / scale) ** 2))) if err.size else 0.0
        ratio = max(ratio, 1e-10)
        if ratio <= 1.0 or h <= _MIN_STEP:
            last = h >= abs(t1 - t)
            t = t1 if last else t + dt
            y = y_new
            k1 = ks[6]
            factor = _SAFETY * ratio ** (-_PI_ALPHA) * err_prev ** _PI_BETA
            err_prev = max(ratio, 1e-4)
        else:
            factor = _SAFETY * ratio ** (-_PI_ALPHA)
        factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        h = min(h_max, max(_MIN_STEP, h * factor))
    return y


def _integrate(rhs, y0, cfg: SolverConfig, t_span, begin_step=lambda: None):
    t0, t1 = float(t_span[0]), float(t_span[1])
    counted = _Counted(rhs)
    if cfg.method == "euler":
        y = _euler(counted, y0, t0, t1, cfg.steps, begin_step)
    else:
        y = _dopri5(counted, y0, t0, t1, cfg, begin_step)
    return y, counted.nfe


def solve(field, x0, cfg: SolverConfig, t_span=(0.0, 1.0)) -> tuple[np.ndarray, int]:
    """Integrate ``dx/dt = field(t, x)`` over ``t_span``; returns ``(x_end, nfe)``.

    ``field`` may return a numpy array or a diffcore Variable.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        return x0.copy(), 0
    return _integrate(field, x0, cfg, t_span)


def solve_with_logdet(field, x_start, cfg: SolverConfig, estimator: TraceEstimator,
                      t_span=(0.0, 1.0), rng: np.random.Generator | None = None) -> AugmentedState:
    """Jointly integrate the state and ``delta_logp`` over ``t_span``.

    With the Hutchinson estimator a fresh probe is drawn at the start of each
    step (each Dopri5 attempt) and held across that step's stage evaluations.
    """
    x_start = np.asarray(x_start, dtype=np.float64)
    n, d = x_start.shape
    if n == 0:
        return AugmentedState(x_start.copy(), np.zeros(0), 0)
    rng = rng if rng is not None else np.random.default_rng(estimator.seed)
    probe: list[np.ndarray | None] = [None]

    def begin_step():
        if estimator.kind == "hutchinson":
            probe[0] = draw_probes(rng, (estimator.probes, n, d), estimator.probe_dist)

    def rhs(t, y):
        v, tr = field_and_trace(field, t, y[:, :d], estimator, probe=probe[0])
        return np.concatenate([v, -tr[:, None]], axis=1)

    y0 = np.concatenate([x_start, np.zeros((n, 1))], axis=1)
    y, nfe = _integrate(rhs, y0, cfg, t_span, begin_step)
    return AugmentedState(y[:, :d], y[:, d], nfe)


def log_density(field, prior: GaussianPrior, x, cfg: SolverConfig, estimator: TraceEstimator,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, int]:
    """``log p1(x)`` by pulling ``x`` back from t=1 to t=0 under ``field``."""
    state = solve_with_logdet(field, x, cfg, estimator, (1.0, 0.0), rng=rng)
    if state.x.shape[0] == 0:
        return np.zeros(0), 0
    return prior.log_pdf(state.x).value - state.delta_logp, state.nfe


def push_forward_sample(field, prior: GaussianPrior, n: int, cfg: SolverConfig,
                        seed: int | np.random.Generator = 0) -> np.ndarray:
    """Sample the prior and transport the samples from t=0 to t=1."""
    if n == 0:
        return np.zeros((0, prior.dim))
    x0 = prior.sample(n, seed)
    return solve(field, x0, cfg, (0.0, 1.0))[0]
