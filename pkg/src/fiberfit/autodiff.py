"""Reverse-mode automatic differentiation over numpy arrays.

A deliberately small tape: only the primitives needed to express tanh
MLPs, their input Jacobians, the anisotropic eikonal residual (which
contains a 2x2 matrix exponential) and the Huber total-variation
penalty. Everything runs in float64 and is bit-deterministic for a
fixed graph. Unsupported numpy operations on a :class:`Var` raise
immediately instead of silently producing an untracked array.

Gradients of gradients are obtained for free: the input Jacobian of a
network is itself built from these primitives (forward-mode chain rule
written as tape operations), so a single reverse sweep through the
combined graph yields exact parameter gradients of Jacobian-dependent
losses.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "asvar",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "affine",
    "damped_matmul",
    "one_minus_square",
    "tanh",
    "fast_tanh",
    "exp",
    "square",
    "sqrt",
    "maximum",
    "vsum",
    "vmean",
    "reshape",
    "column",
    "cosh_sqrt",
    "sinhc_sqrt",
    "sum_of_squares",
    "huber_sqnorm",
    "backward",
    "grad",
]


class Var:
    """Node in the computation graph.

    Holds a float64 numpy value plus links to parent nodes with their
    vector-Jacobian products. Leaves are Vars with no parents; call
    :func:`backward` on a scalar root and read ``leaf.grad``.
    """

    __slots__ = ("value", "parents", "grad")

    # Refuse numpy ufunc dispatch: np.sin(var) etc. must fail loudly,
    # not degrade to an object array outside the tape.
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, leaf={not self.parents})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not a supported primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))


def asvar(x):
    """Wrap ``x`` as a constant leaf unless it already is a Var."""
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic --------------------------------------------------------


def add(a, b):
    a, b = asvar(a), asvar(b)
    out = Var(a.value + b.value)
    sa, sb = np.shape(a.value), np.shape(b.value)
    out.parents = (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    )
    return out


def sub(a, b):
    a, b = asvar(a), asvar(b)
    out = Var(a.value - b.value)
    sa, sb = np.shape(a.value), np.shape(b.value)
    out.parents = (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(-g, sb)),
    )
    return out


def mul(a, b):
    a, b = asvar(a), asvar(b)
    out = Var(a.value * b.value)
    sa, sb = np.shape(a.value), np.shape(b.value)
    av, bv = a.value, b.value
    out.parents = (
        (a, lambda g: _unbroadcast(g * bv, sa)),
        (b, lambda g: _unbroadcast(g * av, sb)),
    )
    return out


def neg(a):
    a = asvar(a)
    out = Var(-a.value)
    out.parents = ((a, lambda g: -g),)
    return out


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes.

    Operands must be at least 2-D; the backward pass sums gradients
    over broadcast batch dimensions.
    """
    a, b = asvar(a), asvar(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = Var(a.value @ b.value)
    av, bv = a.value, b.value
    sa, sb = av.shape, bv.shape
    out.parents = (
        (a, lambda g: _unbroadcast(g @ bv.swapaxes(-1, -2), sa)),
        (b, lambda g: _unbroadcast(av.swapaxes(-1, -2) @ g, sb)),
    )
    return out


# Dense layers dominate the training loss, so the three patterns they
# are built from get fused primitives: one tape node (and one gradient
# allocation) instead of three. Semantics stay trivial and each is
# finite-difference tested like every other primitive.


def affine(x, w, b=None):
    """x @ w.T (+ b), with w stored (n_out, n_in) as in a dense layer."""
    x, w = asvar(x), asvar(w)
    xv, wv = x.value, w.value
    y = xv @ wv.T
    if b is not None:
        b = asvar(b)
        y = y + b.value
    out = Var(y)
    sx = xv.shape
    parents = (
        (x, lambda g: _unbroadcast(g @ wv, sx)),
        (w, lambda g: g.T @ xv),
    )
    if b is not None:
        sb = b.value.shape
        parents += ((b, lambda g: _unbroadcast(g, sb)),)
    out.parents = parents
    return out


def damped_matmul(j, w, damp):
    """damp * (j @ w.T): one forward-mode Jacobian propagation step.

    j may have a single broadcast row shared by every sample in damp.
    """
    j, w, damp = asvar(j), asvar(w), asvar(damp)
    jv, wv, dv = j.value, w.value, damp.value
    jw = jv @ wv.T
    out = Var(dv * jw)
    sj, sd = jv.shape, dv.shape

    def vjp_w(g):
        gd = g * dv
        if jv.shape[0] != gd.shape[0]:
            gd = gd.sum(axis=0, keepdims=True)
        return gd.T @ jv

    out.parents = (
        (j, lambda g: _unbroadcast((g * dv) @ wv, sj)),
        (w, vjp_w),
        (damp, lambda g: _unbroadcast(g * jw, sd)),
    )
    return out


def one_minus_square(a):
    """1 - a^2 (tanh derivative when a = tanh(z))."""
    a = asvar(a)
    av = a.value
    out = Var(1.0 - av * av)
    out.parents = ((a, lambda g: g * (-2.0 * av)),)
    return out


# -- elementwise nonlinearities ---------------------------------------


def fast_tanh(x):
    """tanh via exp, ~1.5x faster than np.tanh here, max error 1 ulp.

    (1-e)/(1+e) with e = exp(-2|x|) cancels for tiny |x|, where tanh(x)
    = x to double precision anyway, so that branch returns x directly.
    """
    ax = np.abs(x)
    e = np.exp(-2.0 * ax)
    t = np.copysign((1.0 - e) / (1.0 + e), x)
    return np.where(ax < 1e-8, x, t)


def tanh(a):
    a = asvar(a)
    y = fast_tanh(a.value)
    out = Var(y)
    out.parents = ((a, lambda g: g * (1.0 - y * y)),)
    return out


def exp(a):
    a = asvar(a)
    y = np.exp(a.value)
    out = Var(y)
    out.parents = ((a, lambda g: g * y),)
    return out


def square(a):
    a = asvar(a)
    av = a.value
    out = Var(av * av)
    out.parents = ((a, lambda g: g * (2.0 * av)),)
    return out


def sqrt(a):
    a = asvar(a)
    y = np.sqrt(a.value)
    out = Var(y)
    out.parents = ((a, lambda g: g * (0.5 / y)),)
    return out


def maximum(a, floor):
    """Elementwise max(a, floor) for a constant floor.

    Subgradient convention: derivative 1 where a >= floor, else 0.
    """
    if isinstance(floor, Var):
        raise TypeError("maximum floor must be a constant")
    a = asvar(a)
    floor = np.asarray(floor, dtype=np.float64)
    mask = a.value >= floor
    out = Var(np.where(mask, a.value, floor))
    out.parents = ((a, lambda g: g * mask),)
    return out


# -- reductions and shape ----------------------------------------------


def vsum(a, axis=None):
    a = asvar(a)
    out = Var(np.sum(a.value, axis=axis))
    sa = a.value.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, sa).copy() if sa else np.asarray(g)
        axes = axis if isinstance(axis, tuple) else (axis,)
        g = np.expand_dims(g, axes)
        return np.broadcast_to(g, sa).copy()

    out.parents = ((a, vjp),)
    return out


def vmean(a, axis=None):
    a = asvar(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(vsum(a, axis=axis), 1.0 / float(n))


def reshape(a, shape):
    a = asvar(a)
    sa = a.value.shape
    out = Var(a.value.reshape(shape))
    out.parents = ((a, lambda g: g.reshape(sa)),)
    return out


def column(a, j):
    """Extract column j of a 2-D Var as a 1-D Var."""
    a = asvar(a)
    if a.ndim != 2:
        raise ValueError("column expects a 2-D Var")
    sa = a.value.shape
    out = Var(a.value[:, j].copy())

    def vjp(g):
        full = np.zeros(sa)
        full[:, j] = g
        return full

    out.parents = ((a, vjp),)
    return out


# -- special functions for the 2x2 matrix exponential -------------------
#
# expm of a symmetric traceless 2x2 block needs cosh(r) and sinh(r)/r
# where r = sqrt(s), s = h^2 + b^2. Both are smooth functions of s
# (removable singularity at s = 0), so they are exposed as primitives
# of s directly; no sqrt of a quantity that can hit zero ever appears.

_SERIES_CUTOFF = 1e-8


def _sinhc_of_s(s):
    # sinh(sqrt(s))/sqrt(s) = 1 + s/6 + s^2/120 + ...
    small = s < _SERIES_CUTOFF
    safe = np.where(small, 1.0, s)
    r = np.sqrt(safe)
    return np.where(small, 1.0 + s / 6.0 + s * s / 120.0, np.sinh(r) / r)


def cosh_sqrt(a):
    """cosh(sqrt(s)) as a function of s >= 0."""
    a = asvar(a)
    s = a.value
    out = Var(np.cosh(np.sqrt(s)))
    half_sinhc = 0.5 * _sinhc_of_s(s)
    out.parents = ((a, lambda g: g * half_sinhc),)
    return out


def sinhc_sqrt(a):
    """sinh(sqrt(s))/sqrt(s) as a function of s >= 0."""
    a = asvar(a)
    s = a.value
    y = _sinhc_of_s(s)
    out = Var(y)
    small = s < _SERIES_CUTOFF
    safe = np.where(small, 1.0, s)
    # d/ds sinhc(sqrt(s)) = (cosh(sqrt(s)) - sinhc(sqrt(s))) / (2 s),
    # series 1/6 + s/60 + s^2/1680 near zero.
    deriv = np.where(
        small,
        1.0 / 6.0 + s / 60.0 + s * s / 1680.0,
        (np.cosh(np.sqrt(safe)) - y) / (2.0 * safe),
    )
    out.parents = ((a, lambda g: g * deriv),)
    return out


def sum_of_squares(vars_):
    """Sum of squared entries over a list of Vars, as one scalar node.

    Used for weight decay: one tape node instead of two per parameter
    tensor, with vjp 2 theta g for each.
    """
    vars_ = [asvar(v) for v in vars_]
    total = 0.0
    for v in vars_:
        total += float(np.sum(v.value * v.value))
    out = Var(np.asarray(total))

    def make_vjp(val):
        return lambda g: (2.0 * g) * val

    out.parents = tuple((v, make_vjp(v.value)) for v in vars_)
    return out


def huber_sqnorm(a, delta):
    """Huber penalty of a vector given its squared norm.

    For s = ||x||^2: returns s/(2 delta) when ||x|| <= delta, else
    ||x|| - delta/2. C^1 in s everywhere, including the knee.
    """
    a = asvar(a)
    s = a.value
    d2 = delta * delta
    quad = s <= d2
    root = np.sqrt(np.where(quad, d2, s))
    out = Var(np.where(quad, s / (2.0 * delta), root - 0.5 * delta))
    deriv = np.where(quad, 1.0 / (2.0 * delta), 0.5 / root)
    out.parents = ((a, lambda g: g * deriv),)
    return out


# -- reverse sweep -----------------------------------------------------


def _topo(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root, wanted=None):
    """Accumulate gradients of a scalar root into ``.grad`` of every node.

    When ``wanted`` (a set of Var ids) is given, subgraphs that cannot
    reach a wanted leaf are skipped; their ``.grad`` stays None.
    """
    if np.ndim(root.value) != 0:
        raise ValueError("backward expects a scalar root")
    order = _topo(root)  # parents before children
    if wanted is None:
        active = None
    else:
        active = set(wanted)
        for node in order:
            if node.parents and any(id(p) in active for p, _ in node.parents):
                active.add(id(node))
    shared = set()  # ids whose .grad aliases another array; never add in place
    for node in order:
        node.grad = None
    root.grad = np.asarray(1.0)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            if active is not None and id(parent) not in active:
                continue
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
                if contrib is g or not (
                    isinstance(contrib, np.ndarray) and contrib.flags.owndata
                ):
                    shared.add(id(parent))
            elif id(parent) in shared or parent.grad.shape != np.shape(contrib):
                parent.grad = parent.grad + contrib
                shared.discard(id(parent))
            else:
                parent.grad += contrib
    return root.grad


def grad(root, leaves):
    """Gradients of a scalar root with respect to the given leaf Vars."""
    backward(root, wanted={id(leaf) for leaf in leaves})
    out = []
    for leaf in leaves:
        g = leaf.grad
        if g is None:
            g = np.zeros_like(leaf.value)
        out.append(np.asarray(g, dtype=np.float64))
    return out
