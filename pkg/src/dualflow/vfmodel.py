"""Time-conditioned vector fields and the learnable diagonal Gaussian prior."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Variable

LOG_2PI = math.log(2.0 * math.pi)
_T_EPS = 1e-12


def check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < -_T_EPS) or np.any(t > 1.0 + _T_EPS) or not np.all(np.isfinite(t)):
        raise ValueError(f"time must lie in [0, 1], got {t if t.ndim == 0 else (t.min(), t.max())}")
    return np.clip(t, 0.0, 1.0)


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(2 pi 2^k t), cos(2 pi 2^k t)]`` for k < dim/2.

    ``t`` may be a scalar (returns shape ``(dim,)``) or a vector (returns ``(n, dim)``).
    """
    if dim % 2:
        raise ValueError(f"time embedding size must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 2.0 ** np.arange(dim // 2)
    angle = 2.0 * math.pi * np.multiply.outer(t, freqs)
    out = np.empty(angle.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


class MlpVectorField:
    """``v(t, x)``: tanh MLP on ``[x, time_embed(t)]`` mapping R^D to R^D.

    The output layer is scaled by ``out_init_scale`` at construction; the
    default of zero makes the initial flow the identity map.
    """

    def __init__(
        self,
        dim: int,
        hidden: Sequence[int] = (64, 64),
        embed_dim: int = 8,
        seed: int | np.random.Generator = 0,
        out_init_scale: float = 0.0,
    ):
        if dim < 1:
            raise ValueError("dim must be positive")
        if embed_dim % 2:
            raise ValueError(f"time embedding size must be even, got {embed_dim}")
        self.dim = dim
        self.hidden = tuple(int(h) for h in hidden)
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        widths = [dim + embed_dim, *self.hidden, dim]
        self.weights: list[Variable] = []
        self.biases: list[Variable] = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(n_in)
            if i == len(widths) - 2:
                bound *= out_init_scale
            self.weights.append(
                Variable(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True, name=f"W{i}")
            )
            self.biases.append(
                Variable(rng.uniform(-bound, bound, n_out), requires_grad=True, name=f"b{i}")
            )

    @property
    def widths(self) -> list[int]:
        return [self.dim + self.embed_dim, *self.hidden, self.dim]

    def parameters(self) -> list[Variable]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def named_parameters(self) -> dict[str, Variable]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def _inputs(self, t, x: Variable) -> Variable:
        t = check_time(t)
        n = x.shape[0]
        emb = time_embed(t, self.embed_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (n, self.embed_dim))
        elif emb.shape[0] != n:
            raise dc.ShapeError("eval_field", x.shape, t.shape, detail="one time per row")
        return dc.concat([x, emb], axis=1)

    def __call__(self, t, x) -> Variable:
        x = x if isinstance(x, Variable) else Variable(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise dc.ShapeError("eval_field", x.shape, detail=f"expected (batch, {self.dim})")
        h = self._inputs(t, x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.affine(h, w, b)
            if i < last:
                h = dc.tanh(h)
        return h

    def jvp(self, t, x, u) -> tuple[Variable, Variable]:
        """Return ``(v(t, x), J u)`` with ``J = dv/dx``, both recorded on the tape.

        The tangent is pushed forward through the layers with first-order
        primitives only, so the result stays differentiable w.r.t. parameters.
        """
        x = x if isinstance(x, Variable) else Variable(x)
        h = self._inputs(t, x)
        du = dc.matmul(u, dc.slice_(self.weights[0], slice(0, self.dim)))
        h = dc.affine(h, self.weights[0], self.biases[0])
        for w, b in zip(self.weights[1:], self.biases[1:]):
            a = dc.tanh(h)
            du = dc.mul(dc.sub(1.0, dc.square(a)), du)
            h = dc.affine(a, w, b)
            du = dc.matmul(du, w)
        return h, du


class LinearVectorField:
    """Analytic field ``v(t, x) = x A^T + b``; used for oracles and tests."""

    def __init__(self, matrix, bias=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.dim = self.matrix.shape[0]
        self.bias = np.zeros(self.dim) if bias is None else np.asarray(bias, dtype=np.float64)

    @classmethod
    def scaled_identity(cls, a: float, dim: int) -> "LinearVectorField":
        return cls(a * np.eye(dim))

    def parameters(self) -> list[Variable]:
        return []

    def __call__(self, t, x) -> Variable:
        check_time(t)
        return dc.affine(x, self.matrix.T, self.bias)

    def jvp(self, t, x, u) -> tuple[Variable, Variable]:
        return self(t, x), dc.matmul(u, self.matrix.T)


def eval_field(model, t, x) -> Variable:
    return model(t, x)


class GaussianPrior:
    """Diagonal Gaussian ``N(mean, diag(exp(log_std))^2)`` with learnable parameters."""

    def __init__(self, dim: int, mean=None, log_std=None):
        self.dim = dim
        self.mean = Variable(np.zeros(dim) if mean is None else mean, requires_grad=True, name="mean")
        self.log_std = Variable(
            np.zeros(dim) if log_std is None else log_std, requires_grad=True, name="log_std"
        )

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.value)

    def parameters(self) -> list[Variable]:
        return [self.mean, self.log_std]

    def named_parameters(self) -> dict[str, Variable]:
        return {"mean": self.mean, "log_std": self.log_std}

    def log_pdf(self, x) -> Variable:
        x = x if isinstance(x, Variable) else Variable(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise dc.ShapeError("prior_log_pdf", x.shape, (self.dim,))
        z = dc.div(dc.sub(x, self.mean), dc.exp(self.log_std))
        per_dim = dc.add(dc.mul(-0.5, dc.square(z)), dc.neg(self.log_std))
        return dc.sub(dc.sum(per_dim, axis=1), 0.5 * LOG_2PI * self.dim)

    def sample(self, n: int, seed: int | np.random.Generator = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((n, self.dim))
        return self.mean.value + self.std * eps

    def fit(self, x: np.ndarray, min_std: float = 1e-6) -> None:
        """Closed-form maximum-likelihood update from latent points ``x``."""
        self.mean.value = np.mean(x, axis=0)
        self.log_std.value = np.log(np.maximum(np.std(x, axis=0), min_std))


def prior_log_pdf(prior: GaussianPrior, x) -> np.ndarray:
    return prior.log_pdf(x).value


def prior_sample(prior: GaussianPrior, n: int, seed: int | np.random.Generator = 0) -> np.ndarray:
    return prior.sample(n, seed)
