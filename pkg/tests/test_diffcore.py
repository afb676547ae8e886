import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualflow import diffcore as dc
from dualflow.diffcore import Tape, Variable
from helpers import central_diff, rel_err


def grad_of(build, *arrays):
    """Reverse-mode gradient of ``sum(build(*vars) * w)`` for a fixed random weighting."""
    with Tape():
        vs = [Variable(a, requires_grad=True) for a in arrays]
        out = build(*vs)
        w = np.random.default_rng(99).uniform(0.5, 1.5, out.shape)
        loss = dc.sum(dc.mul(out, w))
        return dc.grad(loss, vs), w


def fd_of(build, arrays, i, w):
    def f(xi):
        args = list(arrays)
        args[i] = xi
        return float(np.sum(build(*[Variable(a) for a in args]).value * w))

    return central_diff(f, arrays[i])


# (name, builder, input generators); domains keep every primitive smooth
_U = lambda rng, shape: rng.uniform(-2, 2, shape)  # noqa: E731
_POS = lambda rng, shape: rng.uniform(0.5, 2, shape)  # noqa: E731
PRIMITIVES = [
    ("add", dc.add, [(_U, (3, 4)), (_U, (4,))]),
    ("sub", dc.sub, [(_U, (3, 4)), (_U, (3, 4))]),
    ("mul", dc.mul, [(_U, (3, 4)), (_U, (3, 1))]),
    ("div", dc.div, [(_U, (3, 4)), (_POS, (4,))]),
    ("neg", dc.neg, [(_U, (5,))]),
    ("tanh", dc.tanh, [(_U, (3, 4))]),
    ("softplus", dc.softplus, [(_U, (3, 4))]),
    ("exp", dc.exp, [(_U, (3, 4))]),
    ("log", dc.log, [(_POS, (3, 4))]),
    ("square", dc.square, [(_U, (3, 4))]),
    ("sqrt", dc.sqrt, [(_POS, (3, 4))]),
    ("maximum", lambda a: dc.maximum(a, 0.1), [(_U, (3, 4))]),
    ("matmul", dc.matmul, [(_U, (3, 4)), (_U, (4, 2))]),
    ("affine", dc.affine, [(_U, (3, 4)), (_U, (4, 2)), (_U, (2,))]),
    ("sum_axis", lambda a: dc.sum(a, axis=1), [(_U, (3, 4))]),
    ("mean", lambda a: dc.mean(a, axis=0), [(_U, (3, 4))]),
    ("l2norm", lambda a: dc.l2norm(a, axis=1), [(_U, (3, 4))]),
    ("concat", lambda a, b: dc.concat([a, b], axis=1), [(_U, (3, 2)), (_U, (3, 4))]),
    ("slice", lambda a: dc.slice_(a, (slice(None), slice(1, 3))), [(_U, (3, 4))]),
]


@pytest.mark.parametrize("name,build,gens", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_matches_finite_differences(name, build, gens):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [g(rng, shape) for g, shape in gens]
    if name == "maximum":
        # keep inputs away from the kink at 0.1
        arrays[0] = np.where(np.abs(arrays[0] - 0.1) < 0.05, 0.5, arrays[0])
    grads, w = grad_of(build, *arrays)
    for i, g in enumerate(grads):
        assert rel_err(g, fd_of(build, arrays, i, w)) < 1e-6, (name, i)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_composite_gradient_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (4, 3))

    def build(v):
        h = dc.tanh(dc.affine(v, np.full((3, 3), 0.3), np.zeros(3)))
        return dc.add(dc.softplus(h), dc.mul(dc.square(v), 0.5))

    (g,), w = grad_of(build, x)
    assert rel_err(g, fd_of(build, [x], 0, w)) < 1e-6


def test_forward_examples():
    out = dc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])
    assert dc.tanh(0.0).value == 0.0
    assert dc.softplus(0.0).value == pytest.approx(0.693147, abs=1e-6)


def test_backward_sum_of_squares():
    with Tape():
        x = Variable([1.0, 2.0, 3.0], requires_grad=True)
        dc.backward(dc.sum(dc.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_constant_loss_gives_zero_grads():
    x = Variable([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = Variable(3.0)
        dc.backward(loss)
        (g,) = dc.grad(Variable(1.0), [x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_two_layer_mlp_gradients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    params = [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=(6, 1)), rng.normal(size=1)]

    def loss_of(ps):
        h = dc.tanh(dc.affine(x, ps[0], ps[1]))
        return dc.mean(dc.square(dc.affine(h, ps[2], ps[3])))

    with Tape():
        vs = [Variable(p, requires_grad=True) for p in params]
        dc.backward(loss_of(vs))
    for i, v in enumerate(vs):
        def f(pi, i=i):
            ps = list(params)
            ps[i] = pi
            return float(loss_of([Variable(p) for p in ps]).value)

        assert rel_err(v.grad, central_diff(f, params[i])) < 1e-6


def test_vjp_examples():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(dc.vjp(lambda x: dc.matmul(A, x), np.ones(2), [1.0, 0.0]), [1.0, 2.0])
    v = np.array([0.3, -1.2, 5.0])
    np.testing.assert_array_equal(dc.vjp(lambda x: dc.mul(x, 1.0), np.zeros(3), v), v)

    def f(x):
        return dc.concat([dc.square(dc.slice_(x, slice(0, 1))),
                          dc.mul(dc.slice_(x, slice(0, 1)), dc.slice_(x, slice(1, 2)))])

    np.testing.assert_allclose(dc.vjp(f, np.array([2.0, 3.0]), [1.0, 1.0]), [7.0, 2.0])


def test_vjp_basis_rows_form_jacobian():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(4, 4))
    x0 = rng.normal(size=4)

    def f(x):
        return dc.tanh(dc.matmul(W.T, x))

    jac = np.stack([dc.vjp(f, x0, e) for e in np.eye(4)])
    h = 1e-6
    fd = np.stack([(np.tanh((x0 + h * e) @ W) - np.tanh((x0 - h * e) @ W)) / (2 * h) for e in np.eye(4)], axis=1)
    np.testing.assert_allclose(jac, fd, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-10, 10, allow_nan=False), seed=st.integers(0, 1000))
def test_backward_is_linear_in_loss_scale(a, seed):
    x0 = np.random.default_rng(seed).uniform(-2, 2, 4)

    def grads(scale):
        with Tape():
            x = Variable(x0, requires_grad=True)
            loss = dc.mul(scale, dc.sum(dc.mul(dc.tanh(x), dc.exp(x))))
            return dc.grad(loss, [x])[0]

    np.testing.assert_allclose(grads(a), a * grads(1.0), rtol=1e-12, atol=1e-12)


def test_backward_accumulates_and_zero_grads_resets():
    x = Variable([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            dc.backward(dc.sum(dc.mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    dc.zero_grads([x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_grad_leaves_grad_slots_untouched():
    with Tape():
        x = Variable([2.0], requires_grad=True)
        (g,) = dc.grad(dc.sum(dc.square(x)), [x])
    assert g[0] == 4.0
    assert x.grad[0] == 0.0


def test_tape_is_single_use():
    with Tape():
        x = Variable([1.0], requires_grad=True)
        loss = dc.sum(dc.square(x))
        dc.backward(loss)
        with pytest.raises(dc.TapeError):
            dc.backward(loss)
        with pytest.raises(dc.TapeError):
            dc.square(x)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(dc.ShapeError) as info:
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "matmul" in str(info.value) and "(2, 3)" in str(info.value)
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(np.ones(3), np.ones(4))


def test_non_scalar_loss_and_non_finite_values_rejected():
    with Tape():
        x = Variable([1.0, 2.0], requires_grad=True)
        with pytest.raises(dc.ShapeError):
            dc.backward(dc.square(x))
    with pytest.raises(dc.NonFiniteError):
        dc.log(np.array([-1.0]))


def test_l2norm_gradient_is_zero_at_origin():
    with Tape():
        x = Variable(np.zeros((1, 3)), requires_grad=True)
        (g,) = dc.grad(dc.sum(dc.l2norm(x, axis=1)), [x])
    np.testing.assert_array_equal(g, np.zeros((1, 3)))
