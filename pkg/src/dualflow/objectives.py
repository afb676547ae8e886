"""Training objectives (MLE, conditional flow matching, dual flow matching) and the loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Variable
from .divergence import TraceEstimator, tangent_trace
from .odeint import SolverConfig, solve
from .paths import PathSpec, cond_vector_field, sample_xt
from .vfmodel import GaussianPrior, MlpVectorField

log = logging.getLogger(__name__)

OBJECTIVES = ("mle", "fm", "icfm", "rectified", "vptrig", "dfm")
CFM_OBJECTIVES = ("fm", "icfm", "rectified", "vptrig")
DFM_VARIANTS = ("cos_pair", "cos_product_ones")
NORM_FLOOR = 1e-8
T_MAX_FM = 1.0 - 1e-6


class TrainingError(RuntimeError):
    def __init__(self, step: int, detail: str):
        self.step = step
        super().__init__(f"training diverged at step {step}: {detail}")


# -- losses -------------------------------------------------------------------


def mle_loss(model, prior: GaussianPrior, x1, solver: SolverConfig, estimator: TraceEstimator,
             rng: np.random.Generator | None = None) -> Variable:
    """Negative mean log-likelihood of ``x1`` via Euler pull-back from t=1 to t=0.

    Differentiable w.r.t. the model and the prior: the Euler recursion and the
    trace are recorded on the active tape (discretize-then-differentiate).
    """
    if solver.method != "euler":
        raise ValueError("training requires fixed-step solver (euler)")
    rng = rng if rng is not None else np.random.default_rng(estimator.seed)
    x = Variable(np.asarray(x1, dtype=np.float64))
    h = -1.0 / solver.steps
    delta = None
    for k in range(solver.steps):
        v, tr = tangent_trace(model, 1.0 + k * h, x, estimator, rng)
        x = dc.add(x, dc.mul(h, v))
        inc = dc.mul(-h, tr)
        delta = inc if delta is None else dc.add(delta, inc)
    # log p1(x1) = log p0(x0) - delta, delta = integral_0^1 Tr dt
    return dc.neg(dc.mean(dc.sub(prior.log_pdf(x), delta)))


def cfm_loss(model, path: PathSpec, x0, x1, rng: np.random.Generator) -> Variable:
    """Monte-Carlo CFM regression loss, one ``(t, eps)`` draw per row.

    ``x0`` are source samples (ignored for FM, whose source is N(0, I) noise).
    """
    x1 = np.asarray(x1, dtype=np.float64)
    n = x1.shape[0]
    t_hi = T_MAX_FM if path.kind == "fm" else 1.0
    t = rng.uniform(0.0, t_hi, n)
    eps = rng.standard_normal(x1.shape)
    xt = sample_xt(path, t, x0, x1, eps=eps)
    target = cond_vector_field(path, t, xt, x0, x1)
    resid = dc.sub(model(t, xt), target)
    return dc.mean(dc.sum(dc.square(resid), axis=1))


def _unit_cos(a: Variable, b: Variable) -> Variable:
    na = dc.maximum(dc.l2norm(a, axis=1), NORM_FLOOR)
    nb = dc.maximum(dc.l2norm(b, axis=1), NORM_FLOOR)
    return dc.div(dc.sum(dc.mul(a, b), axis=1), dc.mul(na, nb))


def dfm_loss(model_theta, model_lambda, x, y, t, variant: str = "cos_pair") -> Variable:
    """Cosine-distance dual flow matching loss.

    ``cos_pair`` compares ``v_theta(t, x)`` with ``v_lambda(t, y)`` directly;
    ``cos_product_ones`` compares their elementwise product with the ones
    direction.  Both lie in [0, 2].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise dc.ShapeError("dfm_loss", x.shape, y.shape)
    vt = model_theta(t, x)
    vl = model_lambda(t, y)
    if variant == "cos_pair":
        cos = _unit_cos(vt, vl)
    elif variant == "cos_product_ones":
        cos = _unit_cos(dc.mul(vt, vl), np.ones(x.shape))
    else:
        raise ValueError(f"unknown DFM variant {variant!r}; expected one of {DFM_VARIANTS}")
    return dc.mean(dc.sub(1.0, cos))


def bijectivity_residual(model_theta, model_lambda, x, solver: SolverConfig) -> float:
    """Mean round-trip error: forward under ``v_theta`` 0->1, back under ``v_lambda`` 1->0."""
    x = np.asarray(x, dtype=np.float64)
    fwd, _ = solve(model_theta, x, solver, (0.0, 1.0))
    back, _ = solve(model_lambda, fwd, solver, (1.0, 0.0))
    return float(np.mean(np.linalg.norm(back - x, axis=1)))


# -- optimisation -------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Variable], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr:
                p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    objective: str = "icfm"
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    sigma: float | None = None
    dfm_variant: str = "cos_pair"
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 8
    out_init_scale: float | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    trace: TraceEstimator = field(default_factory=lambda: TraceEstimator(kind="exact"))

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.dfm_variant not in DFM_VARIANTS:
            raise ValueError(f"unknown DFM variant {self.dfm_variant!r}")
        if self.objective == "mle" and self.solver.method != "euler":
            raise ValueError("training requires fixed-step solver (euler)")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        self.hidden = tuple(self.hidden)

    @property
    def path(self) -> PathSpec | None:
        return PathSpec(self.objective, self.sigma) if self.objective in CFM_OBJECTIVES else None

    @property
    def resolved_out_init(self) -> float:
        # Cosine distance is flat at the zero vector, so DFM needs a non-zero start.
        if self.out_init_scale is not None:
            return self.out_init_scale
        return 1.0 if self.objective == "dfm" else 0.0


@dataclass
class TrainState:
    config: TrainConfig
    theta: MlpVectorField
    prior: GaussianPrior
    lam: MlpVectorField | None = None
    step: int = 0
    losses: list[float] = field(default_factory=list)
    rng: np.random.Generator | None = None
    optimizer: Adam | None = None

    def parameters(self) -> list[Variable]:
        params = list(self.theta.parameters())
        if self.lam is not None:
            params += self.lam.parameters()
        if self.config.objective == "mle":
            params += self.prior.parameters()
        return params

    def density_field(self, strategy: str = "auto"):
        if strategy == "auto":
            strategy = "reverse_model" if self.lam is not None else "forward_model"
        if strategy == "reverse_model":
            if self.lam is None:
                raise ValueError("reverse_model strategy requires a reverse model (DFM)")
            return self.lam
        if strategy == "forward_model":
            return self.theta
        raise ValueError(f"unknown density strategy {strategy!r}")


def init_state(config: TrainConfig, dim: int, seed: int) -> TrainState:
    seeds = np.random.SeedSequence(seed).spawn(3)
    theta = MlpVectorField(dim, config.hidden, config.embed_dim, np.random.default_rng(seeds[0]),
                           config.resolved_out_init)
    lam = None
    if config.objective == "dfm":
        lam = MlpVectorField(dim, config.hidden, config.embed_dim, np.random.default_rng(seeds[1]),
                             config.resolved_out_init)
    state = TrainState(config, theta, GaussianPrior(dim), lam, rng=np.random.default_rng(seeds[2]))
    state.optimizer = Adam(state.parameters(), config.lr, (config.beta1, config.beta2))
    return state


def step_loss(state: TrainState, batch: np.ndarray) -> Variable:
    cfg = state.config
    rng = state.rng
    if cfg.objective == "mle":
        return mle_loss(state.theta, state.prior, batch, cfg.solver, cfg.trace, rng)
    if cfg.objective == "dfm":
        t = rng.uniform(0.0, 1.0, batch.shape[0])
        y = state.prior.sample(batch.shape[0], rng)
        return dfm_loss(state.theta, state.lam, batch, y, t, cfg.dfm_variant)
    path = cfg.path
    x0 = state.prior.sample(batch.shape[0], rng) if path.needs_source else None
    return cfm_loss(state.theta, path, x0, batch, rng)


def train(config: TrainConfig, data: np.ndarray, seed: int = 0, state: TrainState | None = None,
          callback=None) -> TrainState:
    """Minibatch Adam on the configured objective; deterministic given ``seed``.

    ``callback(step, loss)`` is invoked after every step when given.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError(f"training data must be a non-empty (n, D) array, got {data.shape}")
    if state is None:
        state = init_state(config, data.shape[1], seed)
    params = state.parameters()
    n = data.shape[0]
    for _ in range(config.steps):
        batch = data[state.rng.integers(0, n, config.batch_size)]
        try:
            with dc.Tape():
                loss = step_loss(state, batch)
                dc.backward(loss)
        except dc.NonFiniteError as err:
            raise TrainingError(state.step, str(err)) from err
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingError(state.step, "loss is not finite")
        state.optimizer.step()
        dc.zero_grads(params)
        state.losses.append(value)
        state.step += 1
        if callback is not None:
            callback(state.step, value)
    return state


def fit_prior(state: TrainState, data: np.ndarray, solver: SolverConfig, strategy: str = "auto",
              max_points: int = 20_000) -> None:
    """Maximum-likelihood fit of the Gaussian prior with the flow held fixed.

    Pulls ``data`` back to t=0 under the density field; the prior parameters
    do not enter the log-determinant, so the optimum is the latent mean/std.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] > max_points:
        data = data[np.linspace(0, data.shape[0] - 1, max_points).astype(int)]
    x0, _ = solve(state.density_field(strategy), data, solver, (1.0, 0.0))
    state.prior.fit(x0)
