"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Variable` wraps a dense ``float64`` array.  Operations performed
while a :class:`Tape` is active, and that touch at least one variable with
``requires_grad=True``, are recorded in creation order.  :func:`backward`
replays the record in reverse and accumulates gradients additively; a tape
can be consumed only once.

Outside an active tape the same operations simply compute values, which is
what evaluation-only code paths rely on.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "Variable",
    "Tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "tanh",
    "softplus",
    "exp",
    "log",
    "square",
    "sqrt",
    "sum",
    "mean",
    "concat",
    "slice_",
    "l2norm",
    "maximum",
    "backward",
    "grad",
    "vjp",
    "zero_grads",
]


class DiffError(Exception):
    """Base class for differentiation engine errors."""


class ShapeError(DiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(DiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced NaN or Inf")


class TapeError(DiffError, RuntimeError):
    pass


def as_tensor(x, op: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op)
    return arr


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self) -> None:
        self.nodes: list[Variable] = []
        self.closed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Variable:
    """A float64 array plus gradient slot and, when recorded, its provenance."""

    __slots__ = ("value", "_grad", "requires_grad", "parents", "vjps", "tape", "op", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = as_tensor(value, name or "Variable")
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Variable, ...] = ()
        self.vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self.tape: Tape | None = None
        self.op = "leaf"
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        self._grad = np.asarray(g, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Variable(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _wrap(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _record(op: str, value: np.ndarray, parents: Sequence[Variable], vjps) -> Variable:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    out = Variable.__new__(Variable)
    out.value = value
    out._grad = None
    out.name = None
    out.op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        if tape.closed:
            raise TapeError("cannot record on a tape already consumed by backward")
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjps = tuple(vjps)
        out.tape = tape
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjps = ()
        out.tape = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Variable, b: Variable) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -------------------------------------------------------


def add(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add",
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub",
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    return _record(
        "mul",
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.shape),
            lambda g: _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Variable:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0):
        raise NonFiniteError("div")
    out = a.value / b.value
    return _record(
        "div",
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.shape),
            lambda g: _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def maximum(a, c: float) -> Variable:
    """Elementwise ``max(a, c)`` against a constant floor; gradient passes where ``a > c``."""
    a = _wrap(a)
    mask = a.value > c
    return _record("maximum", np.where(mask, a.value, c), (a,), (lambda g: g * mask,))


# -- unary --------------------------------------------------------------------


def neg(a) -> Variable:
    a = _wrap(a)
    return _record("neg", -a.value, (a,), (lambda g: -g,))


def tanh(a) -> Variable:
    a = _wrap(a)
    y = np.tanh(a.value)
    return _record("tanh", y, (a,), (lambda g: g * (1.0 - y * y),))


def softplus(a) -> Variable:
    a = _wrap(a)
    y = np.logaddexp(0.0, a.value)
    return _record("softplus", y, (a,), (lambda g: g / (1.0 + np.exp(-a.value)),))


def exp(a) -> Variable:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _record("exp", y, (a,), (lambda g: g * y,))


def log(a) -> Variable:
    a = _wrap(a)
    if np.any(a.value <= 0):
        raise NonFiniteError("log")
    return _record("log", np.log(a.value), (a,), (lambda g: g / a.value,))


def square(a) -> Variable:
    a = _wrap(a)
    return _record("square", a.value * a.value, (a,), (lambda g: 2.0 * g * a.value,))


def sqrt(a) -> Variable:
    a = _wrap(a)
    if np.any(a.value < 0):
        raise NonFiniteError("sqrt")
    y = np.sqrt(a.value)

    def _vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(y > 0, 0.5 * g / np.where(y > 0, y, 1.0), 0.0)

    return _record("sqrt", y, (a,), (_vjp,))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Variable:
    """Matrix product for 2-D ``a`` with 2-D or 1-D ``b``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 1:
        return _record(
            "matmul",
            a.value @ b.value,
            (a, b),
            (lambda g: np.outer(g, b.value), lambda g: a.value.T @ g),
        )
    return _record(
        "matmul",
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
    )


def affine(x, w, b) -> Variable:
    """Batched ``x @ w + b`` with ``x`` (n, k), ``w`` (k, m), ``b`` (m,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    return _record(
        "affine",
        x.value @ w.value + b.value,
        (x, w, b),
        (lambda g: g @ w.value.T, lambda g: x.value.T @ g, lambda g: g.sum(axis=0)),
    )


# -- reductions and structure -------------------------------------------------


def _expand(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a, axis: int | None = None) -> Variable:  # noqa: A001
    a = _wrap(a)
    return _record("sum", np.sum(a.value, axis=axis), (a,), (lambda g: _expand(g, a.shape, axis),))


def mean(a, axis: int | None = None) -> Variable:
    a = _wrap(a)
    n = a.value.size if axis is None else a.shape[axis]
    return _record(
        "mean", np.mean(a.value, axis=axis), (a,), (lambda g: _expand(g, a.shape, axis) / n,)
    )


def l2norm(a, axis: int | None = None) -> Variable:
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    a = _wrap(a)
    y = np.sqrt(np.sum(a.value * a.value, axis=axis))

    def _vjp(g):
        ye = y if axis is None else np.expand_dims(y, axis)
        ge = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(ye > 0, ye, 1.0)
        return np.where(ye > 0, ge * a.value / safe, 0.0)

    return _record("l2norm", y, (a,), (_vjp,))


def concat(items: Sequence, axis: int = 0) -> Variable:
    vs = [_wrap(v) for v in items]
    try:
        out = np.concatenate([v.value for v in vs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(v.shape for v in vs)) from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vs])

    def _piece(i):
        lo, hi = bounds[i], bounds[i + 1]

        def _vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return _vjp

    return _record("concat", out, vs, [_piece(i) for i in range(len(vs))])


def slice_(a, index) -> Variable:
    a = _wrap(a)
    try:
        out = a.value[index]
    except IndexError as err:
        raise ShapeError("slice", a.shape, detail=str(err)) from None

    def _vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return full

    return _record("slice", np.array(out, dtype=np.float64), (a,), (_vjp,))


# -- reverse pass -------------------------------------------------------------


def _propagate(loss: Variable, targets: Sequence[Variable] | None, accumulate: bool):
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    tape = loss.tape
    if tape is None:
        # Constant loss: nothing depends on any parameter.
        return {}
    if tape.closed:
        raise TapeError("tape already consumed by backward")
    tape.closed = True

    nodes = tape.nodes
    stop = nodes.index(loss) if nodes[-1] is not loss else len(nodes) - 1

    wanted: set[int] | None = None
    if targets is not None:
        wanted = {id(v) for v in targets}
        for node in nodes[: stop + 1]:
            if any(id(p) in wanted for p in node.parents):
                wanted.add(id(node))

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Variable] = {}
    for node in reversed(nodes[: stop + 1]):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if accumulate:
            node.grad = node.grad + g
        for parent, fn in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            if wanted is not None and id(parent) not in wanted:
                continue
            gp = fn(g)
            key = id(parent)
            adj[key] = adj[key] + gp if key in adj else gp
            if parent.tape is None:
                leaves[key] = parent
    out = {}
    for key, leaf in leaves.items():
        g = adj.get(key)
        if g is None:
            continue
        if accumulate:
            leaf.grad = leaf.grad + g
        out[key] = g
    return out


def backward(loss: Variable) -> None:
    """Accumulate d(loss)/d(value) into ``.grad`` of every reachable variable."""
    _propagate(loss, None, accumulate=True)


def grad(loss: Variable, wrt: Sequence[Variable]) -> list[np.ndarray]:
    """Return d(loss)/d(v) for each ``v`` in ``wrt`` without touching ``.grad``."""
    found = _propagate(loss, wrt, accumulate=False)
    return [found.get(id(v), np.zeros_like(v.value)) for v in wrt]


def vjp(f: Callable[[Variable], Variable], x, v) -> np.ndarray:
    """Vector-Jacobian product ``v^T (df/dx)`` at ``x`` without forming the Jacobian."""
    v = as_tensor(v, "vjp")
    with Tape():
        xv = Variable(x, requires_grad=True)
        out = _wrap(f(xv))
        if out.shape != v.shape:
            raise ShapeError("vjp", out.shape, v.shape)
        (g,) = grad(sum(mul(out, v)), [xv])
    return g


def zero_grads(params: Iterable[Variable]) -> None:
    for p in params:
        p._grad = None
