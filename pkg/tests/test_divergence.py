import numpy as np
import pytest

from dualflow import diffcore as dc
from dualflow.divergence import (EXACT, TraceEstimator, exact_trace, field_and_trace, hutchinson_samples,
                                 hutchinson_trace, tangent_trace)
from dualflow.diffcore import Tape, Variable
from dualflow.vfmodel import LinearVectorField, MlpVectorField


def fd_jacobian(field, t, x, h=1e-6):
    """Dense Jacobian of a single-row field by central differences (independent of the AD path)."""
    d = x.shape[1]
    cols = []
    for e in np.eye(d):
        cols.append((field(t, x + h * e).value - field(t, x - h * e).value)[0] / (2 * h))
    return np.stack(cols, axis=1)


def diag_field(t, x):
    return dc.mul(x, np.array([1.0, 2.0, 3.0]))


def test_exact_trace_examples():
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(exact_trace(diag_field, 0.0, x), 6.0)
    A = np.random.default_rng(1).normal(size=(5, 5))
    np.testing.assert_allclose(exact_trace(LinearVectorField(A), 0.5, np.ones((2, 5))), np.trace(A))
    rot = LinearVectorField(np.array([[0.0, -1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(exact_trace(rot, 0.0, np.ones((3, 2))), 0.0)


def test_exact_trace_matches_finite_difference_jacobian():
    field = MlpVectorField(6, seed=2, out_init_scale=1.0)
    x = np.random.default_rng(3).normal(size=(3, 6))
    tr = exact_trace(field, 0.4, x)
    for i in range(3):
        assert abs(tr[i] - np.trace(fd_jacobian(field, 0.4, x[i:i + 1]))) < 1e-7


def test_exact_trace_dimension_guard():
    with pytest.raises(ValueError, match="Hutchinson"):
        exact_trace(lambda t, x: x, 0.0, np.zeros((1, 513)))


@pytest.mark.parametrize("c", [0.5, -2.0, 3.0])
def test_single_rademacher_probe_on_scaled_identity_is_exact(c):
    est = TraceEstimator("hutchinson", probes=1, seed=11)
    x = np.random.default_rng(0).normal(size=(7, 4))
    np.testing.assert_allclose(hutchinson_trace(LinearVectorField.scaled_identity(c, 4), 0.0, x, est), c * 4)


def test_single_rademacher_probe_on_any_diagonal_jacobian_is_exact():
    est = TraceEstimator("hutchinson", probes=1, seed=2)
    x = np.random.default_rng(0).normal(size=(5, 3))

    def elementwise(t, x):
        return dc.tanh(dc.mul(x, np.array([0.5, -1.0, 2.0])))

    np.testing.assert_allclose(hutchinson_trace(elementwise, 0.0, x, est), exact_trace(elementwise, 0.0, x))


def test_diagonal_jacobian_many_probes():
    est = TraceEstimator("hutchinson", probes=10_000, seed=0)
    samples = hutchinson_samples(diag_field, 0.0, np.ones((1, 3)), est)[:, 0]
    assert abs(samples.mean() - 6.0) <= 3 * max(samples.std() / 100, 1e-12)


def test_hutchinson_is_deterministic_for_a_seed():
    field = MlpVectorField(4, seed=0, out_init_scale=1.0)
    x = np.random.default_rng(1).normal(size=(3, 4))
    est = TraceEstimator("hutchinson", probes=3, seed=5)
    np.testing.assert_array_equal(hutchinson_trace(field, 0.2, x, est), hutchinson_trace(field, 0.2, x, est))


@pytest.mark.parametrize("seed", range(5))
def test_hutchinson_is_unbiased(seed):
    field = MlpVectorField(8, seed=seed, out_init_scale=1.0)
    x = np.random.default_rng(100 + seed).normal(size=(1, 8))
    samples = hutchinson_samples(field, 0.5, x, TraceEstimator("hutchinson", 10_000, seed=seed))[:, 0]
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean() - exact_trace(field, 0.5, x)[0]) <= 4 * se


def test_probe_variances_match_closed_form_and_rademacher_wins():
    field = MlpVectorField(6, seed=4, out_init_scale=1.0)
    x = np.random.default_rng(7).normal(size=(1, 6))
    J = fd_jacobian(field, 0.3, x)
    S = 0.5 * (J + J.T)
    var_gauss = 2 * np.sum(S**2)
    var_rad = 2 * (np.sum(S**2) - np.sum(np.diag(S) ** 2))
    emp = {}
    for dist in ("rademacher", "gaussian"):
        s = hutchinson_samples(field, 0.3, x, TraceEstimator("hutchinson", 10_000, dist, seed=1))[:, 0]
        emp[dist] = s.var(ddof=1)
    assert emp["rademacher"] == pytest.approx(var_rad, rel=0.15)
    assert emp["gaussian"] == pytest.approx(var_gauss, rel=0.15)
    assert emp["rademacher"] <= emp["gaussian"]


def test_field_and_trace_returns_field_values():
    field = MlpVectorField(3, seed=1, out_init_scale=1.0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    v, tr = field_and_trace(field, np.linspace(0, 1, 4), x, EXACT)
    np.testing.assert_allclose(v, field(np.linspace(0, 1, 4), x).value)
    np.testing.assert_allclose(tr, exact_trace(field, np.linspace(0, 1, 4), x))


def test_tangent_trace_agrees_and_is_differentiable():
    field = MlpVectorField(3, hidden=(5,), seed=1, out_init_scale=1.0)
    x0 = np.random.default_rng(0).normal(size=(2, 3))
    with Tape():
        v, tr = tangent_trace(field, 0.6, Variable(x0), EXACT)
        np.testing.assert_allclose(v.value, field(0.6, x0).value)
        np.testing.assert_allclose(tr.value, exact_trace(field, 0.6, x0))
        grads = dc.grad(dc.sum(tr), field.parameters())
    W = field.parameters()[0]
    orig = W.value.copy()
    h = 1e-6
    i, j = 1, 2
    W.value = orig.copy()
    W.value[i, j] += h
    up = exact_trace(field, 0.6, x0).sum()
    W.value = orig.copy()
    W.value[i, j] -= h
    down = exact_trace(field, 0.6, x0).sum()
    W.value = orig
    assert grads[0][i, j] == pytest.approx((up - down) / (2 * h), rel=1e-5)


def test_estimator_validation():
    with pytest.raises(ValueError):
        TraceEstimator("hutchinson", probes=0)
    with pytest.raises(ValueError):
        TraceEstimator("hutchinson", probe_dist="uniform")
    with pytest.raises(ValueError):
        TraceEstimator("hutch")
