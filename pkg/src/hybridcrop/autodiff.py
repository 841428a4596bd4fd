"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Var` holding the forward value and, when
any input requires a gradient, the vector-Jacobian products needed to push
an upstream gradient back to its inputs.  :func:`backward` walks the graph in
reverse creation order.

Only the operations the crop models and networks need are provided.  The GRU
cell is a fused primitive with a hand-derived backward pass because it is
the inner loop of every recurrent model.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping

import numpy as np

_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient stops being finite."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite {where} value produced by operation '{op}'")
        self.op = op
        self.where = where


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "op", "order", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), op: str = "leaf", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.op = op
        self.order = next(_counter)
        self.requires_grad = requires_grad or bool(parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.value.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def leaf(x) -> Var:
    """A variable whose gradient is wanted."""
    return Var(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(value, inputs, vjps, op) -> Var:
    parents = tuple((v, f) for v, f in zip(inputs, vjps) if v.requires_grad)
    return Var(value, parents, op)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _make(a.value + b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _make(a.value - b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _make(a.value * b.value, (a, b),
                 (lambda g: _unbroadcast(g * b.value, a.shape),
                  lambda g: _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Var:
    a, b = const(a), const(b)
    out = a.value / b.value
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g / b.value, a.shape),
                  lambda g: _unbroadcast(-g * out / b.value, b.shape)), "div")


def square(a) -> Var:
    a = const(a)
    return _make(a.value * a.value, (a,), (lambda g: 2.0 * g * a.value,), "square")


def sqrt(a) -> Var:
    a = const(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), (lambda g: 0.5 * g / out,), "sqrt")


def exp(a) -> Var:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), (lambda g: g * out,), "exp")


def log(a) -> Var:
    a = const(a)
    return _make(np.log(a.value), (a,), (lambda g: g / a.value,), "log")


def tanh(a) -> Var:
    a = const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Var:
    a = const(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Var:
    a = const(a)
    pos = a.value > 0
    return _make(np.where(pos, a.value, 0.0), (a,), (lambda g: g * pos,), "relu")


def softplus(a) -> Var:
    a = const(a)
    out = np.logaddexp(0.0, a.value)
    return _make(out, (a,), (lambda g: g * _sigmoid(a.value),), "softplus")


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = const(a), const(b)
    take_a = a.value >= b.value
    return _make(np.where(take_a, a.value, b.value), (a, b),
                 (lambda g: _unbroadcast(g * take_a, a.shape),
                  lambda g: _unbroadcast(g * ~take_a, b.shape)), "maximum")


def minimum(a, b) -> Var:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = const(a), const(b)
    take_a = a.value <= b.value
    return _make(np.where(take_a, a.value, b.value), (a, b),
                 (lambda g: _unbroadcast(g * take_a, a.shape),
                  lambda g: _unbroadcast(g * ~take_a, b.shape)), "minimum")


def clip(x, lo, hi) -> Var:
    """Clamp ``x`` into ``[lo, hi]``.

    On the boundary the gradient goes to ``x`` (the interior side), so a
    value sitting exactly on a bound still receives a useful subgradient.
    """
    x, lo, hi = const(x), const(lo), const(hi)
    below = x.value < lo.value
    above = (x.value > hi.value) & ~below
    inside = ~(below | above)
    out = np.where(below, lo.value, np.where(above, hi.value, x.value))
    return _make(out, (x, lo, hi),
                 (lambda g: _unbroadcast(g * inside, x.shape),
                  lambda g: _unbroadcast(g * below, lo.shape),
                  lambda g: _unbroadcast(g * above, hi.shape)), "clip")


def where(cond, a, b) -> Var:
    """Branch-free selection with a constant boolean condition."""
    cond = np.asarray(cond.value if isinstance(cond, Var) else cond, dtype=bool)
    a, b = const(a), const(b)
    return _make(np.where(cond, a.value, b.value), (a, b),
                 (lambda g: _unbroadcast(np.where(cond, g, 0.0), a.shape),
                  lambda g: _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


# -- reductions and shape ---------------------------------------------------

def vsum(a, axis=None, keepdims=False) -> Var:
    a = const(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _make(out, (a,), (vjp,), "sum")


def mean(a, axis=None) -> Var:
    a = const(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis=axis) * (1.0 / n)


def reshape(a, shape) -> Var:
    a = const(a)
    return _make(a.value.reshape(shape), (a,), (lambda g: g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Var:
    a = const(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), (lambda g: np.transpose(g, inv),), "transpose")


class _Slice:
    """Gradient confined to ``target[idx]``; accumulated in place by :func:`backward`."""

    __slots__ = ("idx", "g")

    def __init__(self, idx, g):
        self.idx, self.g = idx, g


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a, idx) -> Var:
    a = const(a)
    if _is_basic(idx):
        return _make(a.value[idx], (a,), (lambda g: _Slice(idx, g),), "getitem")

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return out

    return _make(a.value[idx], (a,), (vjp,), "getitem")


def unstack(a, axis: int = 0) -> list[Var]:
    """Split along ``axis`` into views whose gradients are scattered cheaply."""
    a = const(a)
    axis = axis % a.ndim
    pre = (slice(None),) * axis
    return [getitem(a, pre + (i,)) for i in range(a.shape[axis])]


def take_along(a, idx: np.ndarray, axis: int = -1) -> Var:
    a = const(a)
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros(a.shape)
        np.put_along_axis(out, idx, g, axis=axis)
        return out

    return _make(np.take_along_axis(a.value, idx, axis=axis), (a,), (vjp,), "take_along")


def concat(xs: Iterable, axis: int = -1) -> Var:
    xs = [const(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def piece(i):
        return lambda g: np.split(g, cuts, axis=axis)[i]

    return _make(np.concatenate([x.value for x in xs], axis=axis), xs,
                 [piece(i) for i in range(len(xs))], "concat")


def stack(xs: Iterable, axis: int = 0) -> Var:
    xs = [const(x) for x in xs]

    def piece(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(np.stack([x.value for x in xs], axis=axis), xs,
                 [piece(i) for i in range(len(xs))], "stack")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Var:
    """Batched ``a @ b`` where ``b`` is a 2-d weight matrix or ``a`` is 2-d."""
    a, b = const(a), const(b)

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)

    def vjp_b(g):
        if a.ndim == 1:
            return np.outer(a.value, g)
        ga = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, b.shape)

    return _make(a.value @ b.value, (a, b), (vjp_a, vjp_b), "matmul")


def dense(x, w, b=None) -> Var:
    """Affine map ``x @ w + b`` over the last axis of ``x``."""
    x, w = const(x), const(w)
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, x.shape[-1])
    out = x2 @ w.value
    if b is not None:
        b = const(b)
        out = out + b.value
    out = out.reshape(lead + (w.shape[1],))

    def vjp_x(g):
        return (g.reshape(-1, w.shape[1]) @ w.value.T).reshape(x.shape)

    def vjp_w(g):
        return x2.T @ g.reshape(-1, w.shape[1])

    inputs, vjps = [x, w], [vjp_x, vjp_w]
    if b is not None:
        inputs.append(b)
        vjps.append(lambda g: g.reshape(-1, w.shape[1]).sum(axis=0))
    return _make(out, inputs, vjps, "dense")


def log_softmax(a, axis: int = -1) -> Var:
    a = const(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), (lambda g: g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def gru_cell(xproj, h, wh, bh=None) -> Var:
    """One step of a gated recurrent unit.

    ``xproj`` is the input projection ``x @ Wx + bx`` of shape (B, 3H) with
    gate blocks ordered reset, update, candidate.  ``wh`` is (H, 3H).
    The reset gate multiplies the recurrent candidate term (``r * (h Whn + bhn)``).
    """
    xproj, h, wh = const(xproj), const(h), const(wh)
    nh = h.shape[-1]
    a = h.value @ wh.value
    if bh is not None:
        bh = const(bh)
        a = a + bh.value
    xr, xz, xn = xproj.value[..., :nh], xproj.value[..., nh:2 * nh], xproj.value[..., 2 * nh:]
    ar, az, an = a[..., :nh], a[..., nh:2 * nh], a[..., 2 * nh:]
    r = _sigmoid(xr + ar)
    z = _sigmoid(xz + az)
    n = np.tanh(xn + r * an)
    out = (1.0 - z) * n + z * h.value
    cache = {}

    def grads(g):
        if cache.get("g") is not g:
            dz = g * (h.value - n)
            dn_pre = g * (1.0 - z) * (1.0 - n * n)
            dr_pre = dn_pre * an * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            cache["dx"] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=-1)
            cache["da"] = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
            cache["g"] = g
        return cache

    def vjp_x(g):
        return grads(g)["dx"]

    def vjp_h(g):
        c = grads(g)
        return g * z + c["da"] @ wh.value.T

    def vjp_wh(g):
        c = grads(g)
        return h.value.reshape(-1, nh).T @ c["da"].reshape(-1, 3 * nh)

    inputs, vjps = [xproj, h, wh], [vjp_x, vjp_h, vjp_wh]
    if bh is not None:
        inputs.append(bh)
        vjps.append(lambda g: grads(g)["da"].reshape(-1, 3 * nh).sum(axis=0))
    return _make(out, inputs, vjps, "gru_cell")


def detach(a) -> Var:
    return Var(const(a).value)


# -- driver ---------------------------------------------------------------------

def _topo(out: Var) -> list[Var]:
    nodes: dict[int, Var] = {}
    todo = [out]
    while todo:
        v = todo.pop()
        if id(v) in nodes:
            continue
        nodes[id(v)] = v
        todo.extend(p for p, _ in v.parents if id(p) not in nodes)
    return sorted(nodes.values(), key=lambda v: v.order)


def _first_nonfinite(out: Var) -> str:
    for v in _topo(out):
        if not np.all(np.isfinite(v.value)):
            return v.op
    return out.op


def backward(out: Var, check_finite: bool = True) -> dict[int, np.ndarray]:
    """Accumulate d(out)/d(node) for every node reachable from ``out``.

    Returns a mapping from ``id(node)`` to gradient array.  ``out`` must be a
    scalar.  With ``check_finite``, a non-finite gradient reaching any leaf
    raises :class:`NonFiniteError` naming the operation where it arose.
    """
    if out.value.size != 1:
        raise ValueError("backward needs a scalar output")
    order = _topo(out)
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    owned: set[int] = set()
    for v in reversed(order):
        g = grads.get(id(v))
        if g is None or not v.parents:
            continue
        for p, vjp in v.parents:
            contrib = vjp(g)
            key = id(p)
            if isinstance(contrib, _Slice):
                if key not in owned:
                    grads[key] = (np.array(grads[key], dtype=np.float64, copy=True) if key in grads
                                  else np.zeros(p.shape))
                    owned.add(key)
                grads[key][contrib.idx] += contrib.g
            elif key in grads:
                grads[key] = grads[key] + contrib
                owned.add(key)
            else:
                grads[key] = np.asarray(contrib, dtype=np.float64)
    if check_finite:
        leaves = [v for v in order if not v.parents and id(v) in grads]
        if not all(np.isfinite(grads[id(v)]).all() for v in leaves):
            raise NonFiniteError(_first_bad(order, grads), "gradient")
    return grads


def _first_bad(order: list[Var], grads: Mapping[int, np.ndarray]) -> str:
    """Name the op where non-finite values first appear (forward, then backward)."""
    for v in order:
        if not np.isfinite(v.value).all():
            return v.op
    for v in reversed(order):
        g = grads.get(id(v))
        if g is not None and not np.isfinite(g).all():
            return v.op
    return "unknown"


def value_and_grad(fn: Callable[[dict[str, Var]], Var],
                   params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar function of named arrays and its exact gradient."""
    leaves = {k: leaf(v) for k, v in params.items()}
    out = fn(leaves)
    if not isinstance(out, Var):
        out = const(out)
    if not np.isfinite(out.value).all():
        raise NonFiniteError(_first_nonfinite(out))
    g = backward(out) if out.requires_grad else {}
    return float(out.value), {k: g.get(id(v), np.zeros_like(v.value)) for k, v in leaves.items()}


def grad(fn: Callable[[dict[str, Var]], Var],
         params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return value_and_grad(fn, params)[1]
