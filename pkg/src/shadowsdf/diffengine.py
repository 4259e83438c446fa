"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive is a plain function that accepts ``Var`` or array-like
arguments.  When no argument is a ``Var`` the primitive simply evaluates with
numpy, so the same model code runs as a fast gradient-free forward pass.

Vector-Jacobian products are themselves written with these primitives.  With
``create_graph=True`` the backward sweep records its own nodes onto the tape,
which gives gradient-of-gradient (normals, Eikonal loss) without a second
engine.
"""

from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Tape", "Var", "ShapeError", "value_of", "is_var",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sqrt",
    "square", "sin", "cos", "sigmoid", "softplus", "relu", "maximum",
    "minimum", "absolute", "where", "sum", "mean", "reshape",
    "broadcast_to", "getitem", "concatenate", "stack", "swapaxes",
    "dot", "norm", "cast", "stop_gradient", "grad", "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


class Node:
    __slots__ = ("op", "parents", "vjp", "kwargs")

    def __init__(self, op, parents, vjp, kwargs):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.kwargs = kwargs


class Tape:
    """Append-only record of primitive applications.

    A tape is single-owner.  Leaves are created with :meth:`var`; every
    primitive applied to a tape's Vars appends a node in topological order.
    """

    def __init__(self):
        self.nodes: list[Node | None] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value, dtype=None) -> "Var":
        value = np.array(value, dtype=dtype if dtype is not None else _float_dtype(value))
        return self._record(value, None)

    def _record(self, value, node):
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def backward(self, loss: "Var", wrt, create_graph=False):
        """Return d(loss)/d(w) for every ``w`` in ``wrt``.

        ``loss`` must be scalar-shaped.  Parameters the loss does not depend
        on receive zeros.  With ``create_graph`` the returned gradients are
        Vars on this tape and can be differentiated again.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        wrt = list(wrt)
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self:
                raise ValueError("gradients can only be taken w.r.t. Vars on this tape")

        needed = self._ancestors(loss.id) & self._descendants(w.id for w in wrt)
        adj: dict[int, object] = {}
        seed = np.ones_like(loss.value)
        adj[loss.id] = self.var(seed) if create_graph else seed
        for i in range(loss.id, -1, -1):
            if i not in adj or i not in needed:
                continue
            node = self.nodes[i]
            if node is None:
                continue
            g = adj[i]
            if create_graph:
                args = node.parents
                out = Var(self, i, self.values[i])
            else:
                args = tuple(p.value if isinstance(p, Var) else p for p in node.parents)
                out = self.values[i]
            contribs = node.vjp(g, out, *args, **node.kwargs)
            for parent, c in zip(node.parents, contribs):
                if c is None or not isinstance(parent, Var) or parent.id not in needed:
                    continue
                if not create_graph:
                    c = np.asarray(c)
                if parent.id in adj:
                    adj[parent.id] = add(adj[parent.id], c)
                else:
                    adj[parent.id] = c
        out = []
        for w in wrt:
            g = adj.get(w.id)
            if g is None:
                g = np.zeros_like(w.value)
                if create_graph:
                    g = self.var(g)
            out.append(g)
        return out

    def _descendants(self, roots):
        roots = set(roots)
        if not roots:
            return set()
        seen = set(roots)
        for i in range(min(roots), len(self.nodes)):
            node = self.nodes[i]
            if node is None or i in seen:
                continue
            for p in node.parents:
                if isinstance(p, Var) and p.id in seen:
                    seen.add(i)
                    break
        return seen

    def _ancestors(self, root):
        seen = {root}
        stack = [root]
        while stack:
            node = self.nodes[stack.pop()]
            if node is None:
                continue
            for p in node.parents:
                if isinstance(p, Var) and p.id not in seen:
                    seen.add(p.id)
                    stack.append(p.id)
        return seen


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 1000.0

    def __init__(self, tape, node_id, value):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == 0.5:
            return sqrt(self)
        raise NotImplementedError("only x**2 and x**0.5 are supported")

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# --------------------------------------------------------------------------
# helpers

def _float_dtype(x):
    dt = getattr(x, "dtype", None)
    if dt is not None and np.issubdtype(dt, np.floating):
        return dt
    return np.float64


def is_var(x):
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _apply(op, fn, vjp, args, **kwargs):
    tape = _tape_of(args)
    vals = [value_of(a) for a in args]
    out = fn(*vals, **kwargs)
    if tape is None:
        return out
    out = np.asarray(out)
    return tape._record(out, Node(op, tuple(args), vjp, kwargs))


def _broadcast_check(op, *vals):
    try:
        return np.broadcast_shapes(*(np.shape(v) for v in vals))
    except ValueError:
        shapes = ", ".join(str(np.shape(v)) for v in vals)
        raise ShapeError(f"{op}: incompatible shapes {shapes}") from None


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    gshape = value_of(g).shape
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    axes = tuple(range(extra))
    axes += tuple(i + extra for i, n in enumerate(shape) if n == 1 and gshape[i + extra] != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return reshape(g, tuple(shape))


def _shape(x):
    return np.shape(value_of(x))


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    _broadcast_check("add", value_of(a), value_of(b))
    return _apply("add", np.add, _add_vjp, (a, b))


def _add_vjp(g, out, a, b):
    return unbroadcast(g, _shape(a)), unbroadcast(g, _shape(b))


def sub(a, b):
    _broadcast_check("sub", value_of(a), value_of(b))
    return _apply("sub", np.subtract, _sub_vjp, (a, b))


def _sub_vjp(g, out, a, b):
    return unbroadcast(g, _shape(a)), unbroadcast(neg(g), _shape(b))


def mul(a, b):
    _broadcast_check("mul", value_of(a), value_of(b))
    return _apply("mul", np.multiply, _mul_vjp, (a, b))


def _mul_vjp(g, out, a, b):
    return unbroadcast(mul(g, b), _shape(a)), unbroadcast(mul(g, a), _shape(b))


def div(a, b):
    _broadcast_check("div", value_of(a), value_of(b))
    return _apply("div", np.divide, _div_vjp, (a, b))


def _div_vjp(g, out, a, b):
    ga = div(g, b)
    return unbroadcast(ga, _shape(a)), unbroadcast(neg(mul(ga, out)), _shape(b))


def neg(a):
    return _apply("neg", np.negative, lambda g, out, a: (neg(g),), (a,))


def square(a):
    return _apply("square", np.square, lambda g, out, a: (mul(g, mul(2.0, a)),), (a,))


def sqrt(a):
    return _apply("sqrt", np.sqrt, lambda g, out, a: (div(mul(g, 0.5), out),), (a,))


def exp(a):
    return _apply("exp", np.exp, lambda g, out, a: (mul(g, out),), (a,))


def log(a):
    return _apply("log", np.log, lambda g, out, a: (div(g, a),), (a,))


def sin(a):
    return _apply("sin", np.sin, lambda g, out, a: (mul(g, cos(a)),), (a,))


def cos(a):
    return _apply("cos", np.cos, lambda g, out, a: (neg(mul(g, sin(a))),), (a,))


def sigmoid(a):
    return _apply("sigmoid", kernels.sigmoid, _sigmoid_vjp, (a,))


def _sigmoid_vjp(g, out, a):
    return (mul(g, mul(out, sub(1.0, out))),)


def softplus(a, beta=1.0):
    """(1/beta) * log(1 + exp(beta * a)), overflow-safe."""
    if not isinstance(a, Var):
        return kernels.softplus(a, beta)
    out, slope = kernels.softplus_sigmoid(a.value, beta)
    return a.tape._record(out, Node("softplus", (a,), _softplus_vjp, {"beta": beta, "slope": slope}))


def _softplus_vjp(g, out, a, beta, slope):
    if isinstance(a, Var):
        return (mul(g, sigmoid(mul(a, beta))),)
    return (g * slope,)


def relu(a):
    return _apply("relu", lambda x: np.maximum(x, 0), _relu_vjp, (a,))


def _relu_vjp(g, out, a):
    return (mul(g, (value_of(a) > 0).astype(value_of(out).dtype)),)


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to ``a``."""
    _broadcast_check("maximum", value_of(a), value_of(b))
    return _apply("maximum", np.maximum, _max_vjp, (a, b))


def _max_vjp(g, out, a, b):
    m = (value_of(a) >= value_of(b)).astype(value_of(out).dtype)
    return unbroadcast(mul(g, m), _shape(a)), unbroadcast(mul(g, 1.0 - m), _shape(b))


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    _broadcast_check("minimum", value_of(a), value_of(b))
    return _apply("minimum", np.minimum, _min_vjp, (a, b))


def _min_vjp(g, out, a, b):
    m = (value_of(a) <= value_of(b)).astype(value_of(out).dtype)
    return unbroadcast(mul(g, m), _shape(a)), unbroadcast(mul(g, 1.0 - m), _shape(b))


def absolute(a):
    return _apply("abs", np.abs, lambda g, out, a: (mul(g, np.sign(value_of(a))),), (a,))


def where(cond, a, b):
    """Select with a constant boolean mask."""
    cond = np.asarray(value_of(cond), dtype=bool)
    _broadcast_check("where", cond, value_of(a), value_of(b))
    return _apply("where", lambda x, y, cond: np.where(cond, x, y), _where_vjp, (a, b), cond=cond)


def _where_vjp(g, out, a, b, cond):
    dt = value_of(out).dtype
    m = cond.astype(dt)
    return unbroadcast(mul(g, m), _shape(a)), unbroadcast(mul(g, 1.0 - m), _shape(b))


def cast(a, dtype):
    """Convert to ``dtype``; the adjoint is converted back."""
    dtype = np.dtype(dtype)
    if value_of(a).dtype == dtype:
        return a
    return _apply("cast", lambda x, dtype: x.astype(dtype), _cast_vjp, (a,), dtype=dtype)


def _cast_vjp(g, out, a, dtype):
    return (cast(g, value_of(a).dtype),)


def stop_gradient(a):
    return value_of(a)


# --------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b):
    sa, sb = _shape(a), _shape(b)
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    return _apply("matmul", np.matmul, _matmul_vjp, (a, b))


def _matmul_vjp(g, out, a, b):
    ga = matmul(g, swapaxes(b, -1, -2))
    gb = matmul(swapaxes(a, -1, -2), g)
    return unbroadcast(ga, _shape(a)), unbroadcast(gb, _shape(b))


def swapaxes(a, ax1, ax2):
    return _apply("swapaxes", np.swapaxes, _swap_vjp, (a,), axis1=ax1, axis2=ax2)


def _swap_vjp(g, out, a, axis1, axis2):
    return (swapaxes(g, axis1, axis2),)


def sum(a, axis=None, keepdims=False):
    return _apply("sum", np.sum, _sum_vjp, (a,), axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, a, axis, keepdims):
    shape = _shape(a)
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
        g = reshape(g, kshape)
    elif axis is None and not keepdims:
        g = reshape(g, (1,) * len(shape))
    return (broadcast_to(g, shape),)


def mean(a, axis=None, keepdims=False):
    shape = _shape(a)
    if axis is None:
        n = int(np.prod(shape)) if shape else 1
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        np.broadcast_shapes(_shape(a), shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {_shape(a)} to {shape}") from None
    return _apply("broadcast_to", lambda x, shape: np.broadcast_to(x, shape).copy(),
                  _bcast_vjp, (a,), shape=shape)


def _bcast_vjp(g, out, a, shape):
    return (unbroadcast(g, _shape(a)),)


def reshape(a, shape):
    shape = tuple(shape)
    return _apply("reshape", np.reshape, _reshape_vjp, (a,), shape=shape)


def _reshape_vjp(g, out, a, shape):
    return (reshape(g, _shape(a)),)


def getitem(a, idx):
    """Gather ``a[idx]``; the adjoint scatters with accumulation."""
    return _apply("gather", lambda x, idx: x[idx], _gather_vjp, (a,), idx=idx)


def _gather_vjp(g, out, a, idx):
    return (_scatter(g, _shape(a), idx),)


def _scatter(g, shape, idx):
    return _apply("scatter", _scatter_np, _scatter_vjp, (g,), shape=shape, idx=idx)


def _scatter_np(g, shape, idx):
    z = np.zeros(shape, dtype=g.dtype)
    if _is_basic_index(idx):
        z[idx] += g
    else:
        np.add.at(z, idx, g)
    return z


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def _scatter_vjp(g, out, src, shape, idx):
    return (getitem(g, idx),)


def concatenate(arrays, axis=-1):
    arrays = list(arrays)
    ndim = len(_shape(arrays[0]))
    for a in arrays[1:]:
        if len(_shape(a)) != ndim:
            raise ShapeError(f"concatenate: rank mismatch {[ _shape(x) for x in arrays ]}")
    sizes = [_shape(a)[axis] for a in arrays]
    tape = _tape_of(arrays)
    out = np.concatenate([value_of(a) for a in arrays], axis=axis)
    if tape is None:
        return out
    return tape._record(out, Node("concatenate", tuple(arrays), _concat_vjp,
                                  {"axis": axis, "sizes": sizes}))


def _concat_vjp(g, out, *parts, axis, sizes):
    res = []
    start = 0
    nd = len(_shape(g))
    ax = axis % nd
    for n in sizes:
        idx = [slice(None)] * nd
        idx[ax] = slice(start, start + n)
        res.append(getitem(g, tuple(idx)))
        start += n
    return res


def stack(arrays, axis=-1):
    arrays = list(arrays)
    shape = _shape(arrays[0])
    nd = len(shape) + 1
    ax = axis % nd
    newshape = shape[:ax] + (1,) + shape[ax:]
    return concatenate([reshape(a, newshape) for a in arrays], axis=ax)


def dot(a, b, axis=-1, keepdims=False):
    return sum(mul(a, b), axis=axis, keepdims=keepdims)


def norm(a, axis=-1, keepdims=False):
    return sqrt(sum(square(a), axis=axis, keepdims=keepdims))


# --------------------------------------------------------------------------
# convenience entry points

def grad(loss, wrt, create_graph=False):
    if not isinstance(loss, Var):
        raise ValueError("loss does not depend on any Var")
    return loss.tape.backward(loss, wrt, create_graph=create_graph)


def finite_difference_check(f, theta, h=1e-5, analytic=None, indices=None, eps=1e-12):
    """Max over coordinates of |a - c| / (|a| + |c| + eps).

    ``f`` maps a float64 parameter vector to a scalar; when ``analytic`` is
    None it must instead return ``(value, gradient)`` for the analytic side.
    ``c`` is the central difference with step ``h``.  ``indices`` restricts
    the coordinates that are probed.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    if analytic is None:
        _, analytic = f(theta)

        def scalar(t):
            return float(f(t)[0])
    else:
        def scalar(t):
            return float(f(t))
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if indices is None:
        indices = range(theta.size)
    worst = 0.0
    for i in indices:
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        central = (scalar(tp) - scalar(tm)) / (2 * h)
        a = analytic[i]
        err = abs(a - central) / (abs(a) + abs(central) + eps)
        worst = max(worst, err)
    return worst
