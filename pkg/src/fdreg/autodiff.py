"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Only the operations the registration loss needs are provided. Each op
records its inputs and a closure computing the vector-Jacobian product;
:func:`backward` replays the tape in reverse topological order.
"""
from dataclasses import dataclass

import numpy as np

from fdreg import kernels


class GradientError(FloatingPointError):
    pass


class Tensor:
    """A node on the tape. Leaves are created with ``requires_grad=True``."""

    __slots__ = ("value", "parents", "backward_fn", "op", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def leaf(value, requires_grad=True):
    return Tensor(np.array(value), requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(value, parents, backward_fn, op):
    """Record a node; collapse to a constant when no input needs gradients."""
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, parents, backward_fn, op, requires_grad=True)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.value * b.value, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def vjp(g):
        ga = unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def neg(a):
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def silu(a):
    """Sigmoid-weighted linear unit ``x * sigmoid(x)``."""
    a = as_tensor(a)
    out, sig = _silu_fwd(a.value)
    return _make(out, (a,), lambda g: (_silu_bwd(g, out, sig),), "silu")


def _silu_fwd(z):
    sig = np.negative(z)
    np.exp(sig, out=sig)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    return z * sig, sig


def _silu_bwd(g, out, sig):
    # d/dz [z s(z)] = s + out (1 - s)
    d = np.subtract(1.0, sig, dtype=sig.dtype)
    d *= out
    d += sig
    d *= g
    return d


def clamp_min(a, lo):
    """``max(a, lo)``; the gradient is zero where the bound is active."""
    a = as_tensor(a)
    keep = a.value >= lo
    return _make(np.where(keep, a.value, lo).astype(a.dtype, copy=False), (a,),
                 lambda g: (np.where(keep, g, 0.0).astype(g.dtype, copy=False),), "clamp_min")


def astype(a, dtype):
    """Cast; gradients are cast back to the input's dtype."""
    a = as_tensor(a)
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    src = a.dtype
    return _make(a.value.astype(dtype), (a,), lambda g: (g.astype(src),), "astype")


def stop_gradient(a):
    """Pass the value through; contribute nothing to the inputs' gradients."""
    a = as_tensor(a)
    return Tensor(a.value, op="stop_gradient")


# -- shape & reductions ------------------------------------------------------

def tsum(a, axis=None):
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.value.sum(axis=axis)), (a,), vjp, "sum")


def mean(a, axis=None):
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a, index):
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), vjp, "getitem")


def take(a, indices, axis):
    """Gather whole slices at integer ``indices`` along ``axis``."""
    shape = a.shape
    indices = np.asarray(indices, dtype=np.intp)
    unique = np.unique(indices).size == indices.size

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        if unique:
            sl[axis] = indices
            out[tuple(sl)] = g
            return (out,)
        gm = np.moveaxis(g, axis, 0)
        om = np.moveaxis(out, axis, 0)
        for i in np.unique(indices):
            om[i] = gm[indices == i].sum(axis=0)
        return (out,)

    return _make(np.take(a.value, indices, axis=axis), (a,), vjp, "take")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.value for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.value for t in tensors], axis=axis), tensors, vjp, "stack")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product following numpy ``@`` semantics (ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.value @ b.value, (a, b), vjp, "matmul")


def dense(w, x, b, activation=None):
    """Fused layer ``act(w @ x + b)`` for (O, I) weights, (I, N) inputs and
    (O, 1) biases. ``activation`` is None or ``"silu"``."""
    w, x, b = as_tensor(w), as_tensor(x), as_tensor(b)
    z = w.value @ x.value
    z += b.value
    if activation is None:
        out, sig = z, None
    elif activation == "silu":
        out, sig = _silu_fwd(z)
    else:
        raise ValueError(f"unknown activation {activation!r}")

    def vjp(g):
        gz = g if sig is None else _silu_bwd(g, out, sig)
        gw = gz @ x.value.T if w.requires_grad else None
        gx = w.value.T @ gz if x.requires_grad else None
        gb = gz.sum(axis=1, keepdims=True) if b.requires_grad else None
        return gw, gx, gb

    return _make(out, (w, x, b), vjp, "dense")


def _ridged(A, ridge):
    J = A.shape[-1]
    if ridge == 0:
        return A
    tr = np.trace(A, axis1=-2, axis2=-1)
    return A + (ridge * tr / J)[..., None, None] * np.eye(J, dtype=A.dtype)


def solve(A, b, ridge=0.0):
    """Batched solve of ``(A + ridge * tr(A) / J * I) x = b``.

    ``A`` has shape (..., J, J) and ``b`` (..., J, K). The adjoint uses the
    transpose-solve identity and propagates through the trace-scaled ridge.
    """
    A, b = as_tensor(A), as_tensor(b)
    Ar = _ridged(A.value, ridge)
    x = np.linalg.solve(Ar, b.value)
    J = A.shape[-1]

    def vjp(g):
        gb = np.linalg.solve(np.swapaxes(Ar, -1, -2), g)
        gA = None
        if A.requires_grad:
            gA = -gb @ np.swapaxes(x, -1, -2)
            if ridge:
                tr = np.trace(gA, axis1=-2, axis2=-1)
                gA = gA + (ridge * tr / J)[..., None, None] * np.eye(J, dtype=gA.dtype)
        return gA, (gb if b.requires_grad else None)

    return _make(x, (A, b), vjp, "solve")


# -- imaging ops ---------------------------------------------------------------

def sep_conv(x, taps, stride=(1, 1, 1), shift=(0, 0, 0)):
    """Separable correlation of a (K, D, H, W) tensor, evaluated at the
    strided sites ``shift + stride * i`` along every spatial axis."""
    x = as_tensor(x)
    lengths = x.shape[1:]
    out = x.value
    for ax in range(3):
        out = kernels.strided_correlate(out, taps[ax], ax + 1, int(stride[ax]), int(shift[ax]))

    def vjp(g):
        for ax in (2, 1, 0):
            g = kernels.strided_correlate_adjoint(
                g, taps[ax], ax + 1, int(stride[ax]), int(shift[ax]), lengths[ax]
            )
        return (g,)

    return _make(out, (x,), vjp, "sep_conv")


def trilinear(data, coords, border=False):
    """Sample a (C, D, H, W) tensor at (3, N) voxel coordinates.

    Returns ``(values, inside)`` where ``values`` is a (C, N) tensor and
    ``inside`` a plain boolean array (not differentiable).
    """
    data, coords = as_tensor(data), as_tensor(coords)
    dv = np.ascontiguousarray(data.value)
    cv = np.ascontiguousarray(coords.value, dtype=dv.dtype)
    values, inside = kernels.trilinear_sample(dv, cv, border)

    def vjp(g):
        gd, gc = kernels.trilinear_adjoint(
            dv, cv, np.ascontiguousarray(g), border, data.requires_grad, coords.requires_grad
        )
        return gd, gc

    return _make(values, (data, coords), vjp, "trilinear"), inside


# -- backward --------------------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, check_finite=True):
    """Reverse-mode gradients of a scalar ``loss`` for every leaf on its tape.

    Returns a dict mapping leaf tensors to gradient arrays and also stores
    each leaf's gradient in ``leaf.grad``. With ``check_finite`` a
    non-finite leaf gradient triggers a checked replay of the tape that
    raises :class:`GradientError` naming the op that first produced it.
    """
    if loss.value.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _toposort(loss)
    leaves = _replay(loss, order, checked=False)
    if check_finite and not all(np.all(np.isfinite(g)) for g in leaves.values()):
        _replay(loss, order, checked=True)
        raise GradientError("non-finite gradient reached a leaf")
    for node, g in leaves.items():
        node.grad = g
    return leaves


def _replay(loss, order, checked):
    grads = {id(loss): np.ones_like(loss.value)}
    owned = set()  # accumulators we allocated and may add into in place
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[node] = g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if checked and not np.all(np.isfinite(pg)):
                raise GradientError(f"non-finite gradient produced by op '{node.op}'")
            key = id(p)
            if key not in grads:
                grads[key] = pg
            elif key in owned:
                grads[key] += pg
            else:
                grads[key] = grads[key] + pg
                owned.add(key)
    return leaves


def grad(loss, wrt, check_finite=True):
    """Gradients of ``loss`` w.r.t. the listed leaves (zeros if unreachable)."""
    found = backward(loss, check_finite)
    return [found.get(t, np.zeros_like(t.value)) for t in wrt]


@dataclass
class GradientBundle:
    """Gradients w.r.t. the velocity field and each basis model's parameters."""

    d_velocity: np.ndarray
    d_omega: tuple = ()
