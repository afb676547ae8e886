import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualflow import diffcore as dc
from dualflow.data import gen_two_moons
from dualflow.diffcore import Tape, Variable
from dualflow.divergence import EXACT
from dualflow.objectives import (TrainConfig, TrainingError, bijectivity_residual, cfm_loss, dfm_loss, init_state,
                                 mle_loss, train)
from dualflow.odeint import SolverConfig
from dualflow.paths import PathSpec, cond_vector_field
from dualflow.vfmodel import GaussianPrior, LinearVectorField, MlpVectorField
from helpers import central_diff, rel_err

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def std_normal_logpdf(z):
    return -0.5 * z**2 - LOG_SQRT_2PI


# -- MLE ----------------------------------------------------------------------


def test_mle_zero_model_at_prior_mode():
    for dim in (1, 3):
        loss = mle_loss(MlpVectorField(dim), GaussianPrior(dim), np.zeros((5, dim)), SolverConfig("euler", 4), EXACT)
        assert float(loss.value) == pytest.approx(0.9189385 * dim, abs=1e-7)


@pytest.mark.parametrize("a", [-1.0, 0.5, 1.0])
def test_mle_affine_flow_closed_form(a):
    x = np.linspace(-2, 2, 9)[:, None]
    n = 1024
    loss = float(mle_loss(LinearVectorField.scaled_identity(a, 1), GaussianPrior(1), x,
                          SolverConfig("euler", n), EXACT).value)
    # Euler recursion pulls x back to x (1 - a/n)^n; the integrated trace is exactly a
    euler_nll = np.mean(-std_normal_logpdf(x * (1 - a / n) ** n) + a)
    assert abs(loss - euler_nll) < 1e-6
    # continuous flow: NLL = -log N(x e^{-a}) + a, reached at rate O(1/n)
    exact_nll = np.mean(-std_normal_logpdf(x * math.exp(-a)) + a)
    bias_bound = np.mean(x**2) * math.exp(-2 * a) * (a * a / n) * 1.1
    assert abs(loss - exact_nll) < bias_bound


def test_mle_gradient_matches_finite_differences():
    model = MlpVectorField(2, hidden=(4,), embed_dim=2, seed=3, out_init_scale=1.0)
    prior = GaussianPrior(2, mean=[0.1, -0.2], log_std=[0.2, -0.1])
    x = np.random.default_rng(0).normal(size=(6, 2))
    solver = SolverConfig("euler", 3)
    params = model.parameters() + prior.parameters()
    with Tape():
        grads = dc.grad(mle_loss(model, prior, x, solver, EXACT), params)
    for p, g in zip(params, grads):
        orig = p.value.copy()

        def f(v, p=p):
            p.value = v
            return float(mle_loss(model, prior, x, solver, EXACT).value)

        fd = central_diff(f, orig)
        p.value = orig
        assert rel_err(g, fd) < 1e-5


def test_mle_requires_fixed_step_solver():
    with pytest.raises(ValueError, match="fixed-step"):
        mle_loss(MlpVectorField(1), GaussianPrior(1), np.zeros((1, 1)), SolverConfig("dopri5"), EXACT)
    with pytest.raises(ValueError, match="fixed-step"):
        TrainConfig(objective="mle", solver=SolverConfig("dopri5"))


def test_mle_training_decreases_loss():
    data = np.random.default_rng(0).normal(2.0, 0.5, size=(2000, 1))
    state = train(TrainConfig(objective="mle", steps=200, lr=1e-2, batch_size=128), data, seed=0)
    assert np.mean(state.losses[-20:]) < np.mean(state.losses[:20]) - 0.5


# -- CFM ----------------------------------------------------------------------


class OracleField:
    """Returns the exact conditional target for the rows it was built with."""

    def __init__(self, path, x0, x1):
        self.path, self.x0, self.x1 = path, x0, x1

    def __call__(self, t, x):
        return Variable(cond_vector_field(self.path, t, x.value if isinstance(x, Variable) else x, self.x0, self.x1))


@pytest.mark.parametrize("kind", ["fm", "rectified", "vptrig", "icfm"])
def test_cfm_loss_vanishes_for_oracle_field(kind):
    path = PathSpec(kind)
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(64, 2)), rng.normal(size=(64, 2))
    loss = cfm_loss(OracleField(path, x0, x1), path, x0, x1, np.random.default_rng(1))
    assert float(loss.value) == 0.0


def test_cfm_zero_model_rectified_matches_expected_squared_gap():
    rng = np.random.default_rng(2)
    n, d = 20_000, 2
    x1 = gen_two_moons(n, seed=1)
    x0 = rng.standard_normal((n, d))
    loss = float(cfm_loss(MlpVectorField(d), PathSpec("rectified"), x0, x1, rng).value)
    per_row = np.sum((x1 - x0) ** 2, axis=1)
    expected = d + np.mean(np.sum(x1**2, axis=1))  # E|x1 - x0|^2 with x0 ~ N(0, I) independent
    assert abs(loss - expected) <= 3 * per_row.std() / math.sqrt(n)


class ToyField:
    """v(t, x) = a x + b t with two scalar parameters."""

    def __init__(self, a, b):
        self.a = Variable([a], requires_grad=True)
        self.b = Variable([b], requires_grad=True)

    def parameters(self):
        return [self.a, self.b]

    def __call__(self, t, x):
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return dc.add(dc.mul(x, self.a), dc.mul(t, self.b))


@pytest.mark.parametrize("kind", ["fm", "icfm", "vptrig"])
def test_cfm_gradient_matches_finite_differences(kind):
    path = PathSpec(kind)
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(32, 1)), rng.normal(1.0, 0.3, size=(32, 1))
    model = ToyField(0.3, -0.7)
    with Tape():
        grads = dc.grad(cfm_loss(model, path, x0, x1, np.random.default_rng(5)), model.parameters())

    def f(ab):
        return float(cfm_loss(ToyField(*ab), path, x0, x1, np.random.default_rng(5)).value)

    assert rel_err(np.concatenate(grads), central_diff(f, np.array([0.3, -0.7]))) < 1e-5


# -- DFM ----------------------------------------------------------------------


def const_field(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return lambda t, x: Variable(rows)


def test_dfm_examples():
    model = MlpVectorField(3, seed=1, out_init_scale=1.0)
    x = np.random.default_rng(0).normal(size=(8, 3))
    t = np.full(8, 0.4)
    assert float(dfm_loss(model, model, x, x, t).value) == pytest.approx(0.0, abs=1e-15)
    loss = dfm_loss(const_field([[1.0, 0.0]]), const_field([[0.0, 1.0]]), np.zeros((1, 2)), np.zeros((1, 2)), [0.5])
    assert float(loss.value) == 1.0
    loss = dfm_loss(const_field([[2.0]]), const_field([[0.5]]), np.zeros((1, 1)), np.zeros((1, 1)), [0.5],
                    "cos_product_ones")
    assert float(loss.value) == 0.0


def test_dfm_loss_range_and_zero_vectors():
    zero = const_field(np.zeros((3, 2)))
    other = const_field(np.ones((3, 2)))
    for variant in ("cos_pair", "cos_product_ones"):
        val = float(dfm_loss(zero, other, np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), variant).value)
        assert 0.0 <= val <= 2.0
    with pytest.raises(ValueError):
        dfm_loss(zero, other, np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), "cos_whatever")


@settings(max_examples=40, deadline=None)
@given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000), variant=st.sampled_from(["cos_pair", "cos_product_ones"]))
def test_dfm_loss_is_scale_invariant(c, seed, variant):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 16, 4))
    z = np.zeros((16, 4))
    base = float(dfm_loss(const_field(a), const_field(b), z, z, np.zeros(16), variant).value)
    scaled = float(dfm_loss(const_field(c * a), const_field(b), z, z, np.zeros(16), variant).value)
    assert abs(base - scaled) <= 4 * np.finfo(float).eps


def test_dfm_product_identity_on_reciprocal_pair():
    # v_theta = 2 + x, v_lambda = 1 / (2 + x): product is exactly one everywhere
    x = np.linspace(-1, 1, 11)[:, None]
    f = lambda t, v: dc.add(2.0, v)  # noqa: E731
    g = lambda t, v: dc.div(1.0, dc.add(2.0, v))  # noqa: E731
    assert float(dfm_loss(f, g, x, x, np.zeros(11), "cos_product_ones").value) == pytest.approx(0.0, abs=1e-15)


def test_bijectivity_residual_examples():
    x = np.random.default_rng(0).normal(size=(20, 2))
    tol = 1e-8
    solver = SolverConfig("dopri5", atol=tol, rtol=tol)
    assert bijectivity_residual(MlpVectorField(2), MlpVectorField(2, seed=1), x, solver) == 0.0
    same = LinearVectorField.scaled_identity(0.7, 2)
    assert bijectivity_residual(same, same, x, solver) < 10 * tol
    th = MlpVectorField(2, seed=2, out_init_scale=1.0)
    la = MlpVectorField(2, seed=3, out_init_scale=1.0)
    assert bijectivity_residual(th, la, x, solver) > 1e-3


def test_bijectivity_improves_after_dfm_on_1d_task():
    # Known red: in one dimension cosine distance only sees signs, so the loss
    # is piecewise constant in the parameters and training cannot move them.
    x = np.random.default_rng(0).normal(2.0, 0.5, size=(2000, 1))
    cfg = TrainConfig(objective="dfm", steps=1000)
    solver = SolverConfig("dopri5", atol=1e-6, rtol=1e-6)
    start = init_state(cfg, 1, seed=0)
    before = bijectivity_residual(start.theta, start.lam, x[:500], solver)
    state = train(cfg, x, seed=0)
    after = bijectivity_residual(state.theta, state.lam, x[:500], solver)
    assert after <= 0.5 * before


# -- training loop --------------------------------------------------------------


def test_zero_learning_rate_freezes_parameters():
    data = gen_two_moons(500, seed=0)
    for objective in ("icfm", "dfm"):
        cfg = TrainConfig(objective=objective, steps=20, lr=0.0)
        before = [p.value.copy() for p in init_state(cfg, 2, seed=4).parameters()]
        after = [p.value for p in train(cfg, data, seed=4).parameters()]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("objective", ["fm", "icfm", "rectified", "vptrig", "dfm", "mle"])
def test_training_is_deterministic(objective):
    data = gen_two_moons(500, seed=0)
    cfg = TrainConfig(objective=objective, steps=15, batch_size=32)
    assert train(cfg, data, seed=3).losses == train(cfg, data, seed=3).losses


def test_dfm_two_moons_loss_drops_tenfold():
    state = train(TrainConfig(objective="dfm", steps=2000, batch_size=256), gen_two_moons(4000, seed=0), seed=0)
    assert np.mean(state.losses[-20:]) < 0.1 * state.losses[0]


def test_non_finite_data_aborts_with_step():
    data = np.full((10, 2), np.nan)
    with pytest.raises(TrainingError) as info:
        train(TrainConfig(objective="icfm", steps=50, batch_size=10), data, seed=0)
    assert info.value.step == 0


def test_callback_and_resume():
    data = gen_two_moons(300, seed=0)
    seen = []
    cfg = TrainConfig(objective="icfm", steps=5, batch_size=16)
    state = train(cfg, data, seed=0, callback=lambda step, loss: seen.append(step))
    assert seen == [1, 2, 3, 4, 5]
    state = train(cfg, data, seed=0, state=state)
    assert state.step == 10 and len(state.losses) == 10
