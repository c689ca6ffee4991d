"""A small reverse-mode differentiation engine over float64 numpy arrays.

Expressions are built lazily from :class:`Node` objects and evaluated with
:func:`forward`; :func:`backward` then propagates adjoints in reverse
topological order and returns a gradient aligned with a
:class:`ParameterStore`.

Nodes hold whole arrays rather than scalars, so a single graph can carry a
batch of Monte Carlo samples over a whole time grid. Elementwise binary
operations follow numpy broadcasting; their adjoints are summed back to the
operand shape.

Example
-------
>>> store = ParameterStore()
>>> w = store.add("w", np.array([3.0]))
>>> y = sum_(square(w))
>>> forward(y)
9.0
>>> backward(y, store)
array([6.])
"""
import numpy as np
from scipy.special import expit

LOG_2PI = float(np.log(2.0 * np.pi))


class AutodiffError(Exception):
    pass


class MissingInputError(AutodiffError, KeyError):
    pass


class NumericFault(AutodiffError, FloatingPointError):
    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"NaN produced by op '{op}'")


class GraphStateError(AutodiffError, RuntimeError):
    pass


# --------------------------------------------------------------------------
# graph nodes


class Node:
    """One vertex of an expression graph.

    ``value`` is filled by :func:`forward`; ``grad`` is the adjoint
    accumulator filled by :func:`backward`.
    """

    __slots__ = ("op", "parents", "attrs", "value", "grad", "_topo")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, op, parents=(), attrs=None):
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.value = None
        self.grad = None
        self._topo = None

    def __repr__(self):
        shape = None if self.value is None else np.shape(self.value)
        return f"Node(op={self.op!r}, shape={shape})"

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

    def __pow__(self, exponent):
        if exponent != 2:
            raise AutodiffError("only squaring is supported")
        return square(self)

    def __getitem__(self, index):
        if not isinstance(index, int):
            raise AutodiffError("nodes only support integer indexing along the last axis")
        return take(self, index)


def as_node(x):
    if isinstance(x, Node):
        return x
    return const(x)


def const(value):
    node = Node("const", attrs={"value": np.asarray(value, dtype=np.float64)})
    return node


def placeholder(name):
    """A leaf whose value is supplied through the ``bindings`` of :func:`forward`."""
    return Node("input", attrs={"name": name})


# --------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Flat float64 vector of trainable values split into named slices."""

    def __init__(self):
        self.data = np.zeros(0)
        self._slices = {}
        self._nodes = {}

    def __len__(self):
        return self.data.size

    def __contains__(self, name):
        return name in self._slices

    @property
    def names(self):
        return list(self._slices)

    def add(self, name, value):
        if name in self._slices:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.asarray(value, dtype=np.float64)
        self._slices[name] = (self.data.size, value.shape)
        self.data = np.concatenate([self.data, value.ravel()])
        node = Node("param", attrs={"store": self, "name": name})
        self._nodes[name] = node
        return node

    def node(self, name):
        return self._nodes[name]

    def slice(self, name):
        offset, shape = self._slices[name]
        return slice(offset, offset + int(np.prod(shape, dtype=int)))

    def shape(self, name):
        return self._slices[name][1]

    def get(self, name):
        return self.data[self.slice(name)].reshape(self.shape(name))

    def set(self, name, value):
        self.data[self.slice(name)] = np.asarray(value, dtype=np.float64).ravel()

    def manifest(self):
        return [
            {"name": name, "offset": int(offset), "shape": [int(s) for s in shape]}
            for name, (offset, shape) in self._slices.items()
        ]

    def copy_values(self):
        return self.data.copy()


# --------------------------------------------------------------------------
# primitives
#
# Each entry maps op-kind -> (forward(values, attrs), vjp(g, values, out, attrs)).
# vjp returns one adjoint per parent (None where no gradient flows).

_PRIMITIVES = {}


def _primitive(name):
    def register(pair):
        _PRIMITIVES[name] = pair
        return pair

    return register


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(v):
    return np.shape(v)


_primitive("add")(
    (
        lambda v, a: v[0] + v[1],
        lambda g, v, out, a: (_unbroadcast(g, _shape(v[0])), _unbroadcast(g, _shape(v[1]))),
    )
)
_primitive("sub")(
    (
        lambda v, a: v[0] - v[1],
        lambda g, v, out, a: (_unbroadcast(g, _shape(v[0])), _unbroadcast(-g, _shape(v[1]))),
    )
)
_primitive("mul")(
    (
        lambda v, a: v[0] * v[1],
        lambda g, v, out, a: (
            _unbroadcast(g * v[1], _shape(v[0])),
            _unbroadcast(g * v[0], _shape(v[1])),
        ),
    )
)
_primitive("div")(
    (
        lambda v, a: v[0] / v[1],
        lambda g, v, out, a: (
            _unbroadcast(g / v[1], _shape(v[0])),
            _unbroadcast(-g * out / v[1], _shape(v[1])),
        ),
    )
)
_primitive("neg")((lambda v, a: -v[0], lambda g, v, out, a: (-g,)))
_primitive("exp")((lambda v, a: np.exp(v[0]), lambda g, v, out, a: (g * out,)))
_primitive("log")((lambda v, a: np.log(v[0]), lambda g, v, out, a: (g / v[0],)))
_primitive("square")((lambda v, a: v[0] * v[0], lambda g, v, out, a: (2.0 * g * v[0],)))
_primitive("sqrt")((lambda v, a: np.sqrt(v[0]), lambda g, v, out, a: (0.5 * g / out,)))
_primitive("sigmoid")((lambda v, a: expit(v[0]), lambda g, v, out, a: (g * out * (1.0 - out),)))
_primitive("softplus")(
    (lambda v, a: np.logaddexp(0.0, v[0]), lambda g, v, out, a: (g * expit(v[0]),))
)
# subgradient 0 at the kink
_primitive("relu")(
    (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, out, a: (g * (v[0] > 0.0),))
)
_primitive("tanh")((lambda v, a: np.tanh(v[0]), lambda g, v, out, a: (g * (1.0 - out * out),)))


def _matmul_fwd(v, a):
    x, w = v
    # one 2-D BLAS call is much faster than numpy's batched loop
    flat = x.reshape(-1, x.shape[-1]) @ w
    return flat.reshape(x.shape[:-1] + (w.shape[-1],))


def _matmul_vjp(g, v, out, a):
    x, w = v
    g2 = g.reshape(-1, g.shape[-1])
    gx = (g2 @ w.T).reshape(x.shape)
    gw = x.reshape(-1, x.shape[-1]).T @ g2
    return gx, gw


_primitive("matmul")((_matmul_fwd, _matmul_vjp))


def _dense_fwd(v, a):
    x, w, b = v
    out = _matmul_fwd((x, w), a)
    out = out + b
    if a["relu"]:
        np.maximum(out, 0.0, out=out)
    return out


def _dense_vjp(g, v, out, a):
    x, w, b = v
    if a["relu"]:
        g = g * (out > 0.0)
    gx, gw = _matmul_vjp(g, (x, w), None, a)
    return gx, gw, _unbroadcast(g, _shape(b))


# fused x @ w + b (+ relu): one output array instead of three
_primitive("dense")((_dense_fwd, _dense_vjp))


def _sum_vjp(g, v, out, a):
    axis = a["axis"]
    shape = _shape(v[0])
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


_primitive("sum")((lambda v, a: np.sum(v[0], axis=a["axis"]), _sum_vjp))


def _gauss_fwd(v, a):
    x, mean, var = v
    r = x - mean
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * r * r / var


def _gauss_vjp(g, v, out, a):
    x, mean, var = v
    r = x - mean
    dx = -g * r / var
    dvar = g * (0.5 * r * r / var - 0.5) / var
    return (
        _unbroadcast(dx, _shape(x)),
        _unbroadcast(-dx, _shape(mean)),
        _unbroadcast(dvar, _shape(var)),
    )


_primitive("gaussian_logpdf")((_gauss_fwd, _gauss_vjp))

# structural (pure data movement) ops
_primitive("reshape")(
    (
        lambda v, a: np.reshape(v[0], a["shape"]),
        lambda g, v, out, a: (np.reshape(g, _shape(v[0])),),
    )
)
_primitive("expand")(
    (
        lambda v, a: np.broadcast_to(v[0], a["shape"]),
        lambda g, v, out, a: (_unbroadcast(g, _shape(v[0])),),
    )
)


def _take_vjp(g, v, out, a):
    full = np.zeros(_shape(v[0]))
    full[..., a["index"]] = g
    return (full,)


_primitive("take")((lambda v, a: np.asarray(v[0])[..., a["index"]], _take_vjp))
_primitive("stack")(
    (
        lambda v, a: np.stack(v, axis=-1),
        lambda g, v, out, a: tuple(g[..., i] for i in range(len(v))),
    )
)
_primitive("reverse")(
    (
        lambda v, a: np.flip(v[0], axis=a["axis"]),
        lambda g, v, out, a: (np.flip(g, axis=a["axis"]),),
    )
)


def _window_fwd(v, a):
    x = v[0]
    k = a["k"]
    n_time = x.shape[-2]
    pad = np.zeros(x.shape[:-2] + (k,) + x.shape[-1:])
    padded = np.concatenate([pad, x], axis=-2)
    # slot s (1..k) holds x[t - s]
    slots = [padded[..., k - s : k - s + n_time, :] for s in range(1, k + 1)]
    return np.concatenate(slots, axis=-1)


def _window_vjp(g, v, out, a):
    x = v[0]
    k = a["k"]
    n_time, p = x.shape[-2], x.shape[-1]
    gx = np.zeros(x.shape)
    for s in range(1, min(k, n_time - 1) + 1):
        gx[..., : n_time - s, :] += g[..., s:, (s - 1) * p : s * p]
    return (gx,)


_primitive("window")((_window_fwd, _window_vjp))


# --------------------------------------------------------------------------
# builders


def _op(name, *parents, **attrs):
    return Node(name, [as_node(p) for p in parents], attrs)


def add(a, b):
    return _op("add", a, b)


def sub(a, b):
    return _op("sub", a, b)


def mul(a, b):
    return _op("mul", a, b)


def div(a, b):
    return _op("div", a, b)


def neg(a):
    return _op("neg", a)


def exp(a):
    return _op("exp", a)


def log(a):
    return _op("log", a)


def square(a):
    return _op("square", a)


def sqrt(a):
    return _op("sqrt", a)


def sigmoid(a):
    return _op("sigmoid", a)


def softplus(a):
    return _op("softplus", a)


def log_sigmoid(a):
    return neg(softplus(neg(a)))


def relu(a):
    return _op("relu", a)


def tanh(a):
    return _op("tanh", a)


def matmul(x, w):
    """``x @ w`` for ``x`` of shape (..., a) and a matrix ``w`` of shape (a, b)."""
    return _op("matmul", x, w)


def dense(x, w, b, relu=False):
    """``x @ w + b`` with an optional ReLU, as a single node.

    ``b`` may be any node broadcastable against the product.
    """
    return _op("dense", x, w, b, relu=bool(relu))


def sum_(a, axis=None):
    return _op("sum", a, axis=axis)


def gaussian_logpdf(x, mean, var):
    """Elementwise log N(x; mean, var)."""
    return _op("gaussian_logpdf", x, mean, var)


def reshape(a, shape):
    return _op("reshape", a, shape=tuple(shape))


def expand(a, shape):
    return _op("expand", a, shape=tuple(shape))


def take(a, index):
    """Select component ``index`` of the last axis."""
    return _op("take", a, index=index)


def stack(nodes):
    """Stack equally shaped nodes along a new last axis."""
    return Node("stack", [as_node(n) for n in nodes])


def reverse(a, axis):
    return _op("reverse", a, axis=axis)


def window(a, k):
    """Lagged windows along the time axis (second to last) with zero padding.

    For input (..., T, p) returns (..., T, k*p) whose slot ``s`` (1-based)
    holds the input at time ``t - s``.
    """
    return _op("window", a, k=int(k))


# --------------------------------------------------------------------------
# evaluation


def topological_order(root):
    if root._topo is not None:
        return root._topo
    order = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack_.append((parent, False))
    root._topo = order
    return order


def _leaf_value(node, bindings):
    if node.op == "const":
        return node.attrs["value"]
    if node.op == "param":
        return node.attrs["store"].get(node.attrs["name"])
    name = node.attrs["name"]
    if bindings is None or name not in bindings:
        raise MissingInputError(f"no binding for input {name!r}")
    return np.asarray(bindings[name], dtype=np.float64)


def forward(expr, bindings=None, check_finite=True):
    """Evaluate ``expr``, caching every intermediate value for :func:`backward`.

    Returns a python float for scalar expressions and an array otherwise.
    With ``check_finite`` a NaN anywhere raises :class:`NumericFault` naming
    the op that produced it.
    """
    order = topological_order(expr)
    for node in order:
        node.grad = None
        if not node.parents:
            node.value = _leaf_value(node, bindings)
            continue
        fwd = _PRIMITIVES[node.op][0]
        with np.errstate(all="ignore"):
            node.value = np.asarray(fwd([p.value for p in node.parents], node.attrs))
        if check_finite and np.isnan(node.value).any():
            raise NumericFault(node.op)
    value = expr.value
    return float(value) if value.ndim == 0 else value


def backward(expr, store=None):
    """Accumulate adjoints of ``expr`` (which must be a scalar) into every node.

    Returns d expr / d w for all entries of ``store``, with exact zeros for
    parameters that do not take part in ``expr``. When ``store`` is omitted
    the store of the graph's parameter leaves is used.
    """
    order = topological_order(expr)
    if any(node.value is None for node in order):
        raise GraphStateError("backward() called before forward()")
    if np.size(expr.value) != 1:
        raise GraphStateError("backward() needs a scalar expression")
    for node in order:
        node.grad = None
    expr.grad = np.ones_like(expr.value)
    for node in reversed(order):
        if node.grad is None or not node.parents:
            continue
        vjp = _PRIMITIVES[node.op][1]
        with np.errstate(all="ignore"):
            adjoints = vjp(node.grad, [p.value for p in node.parents], node.value, node.attrs)
        for parent, adj in zip(node.parents, adjoints):
            if adj is None:
                continue
            if parent.grad is None:
                # adjoints are never mutated in place, so no copy is needed
                parent.grad = np.asarray(adj, dtype=np.float64)
            else:
                parent.grad = parent.grad + adj

    params = [n for n in order if n.op == "param"]
    if store is None:
        stores = {id(n.attrs["store"]): n.attrs["store"] for n in params}
        if len(stores) > 1:
            raise GraphStateError("graph mixes parameter stores; pass store explicitly")
        if not stores:
            return np.zeros(0)
        store = next(iter(stores.values()))
    grad = np.zeros(len(store))
    for node in params:
        if node.attrs["store"] is not store or node.grad is None:
            continue
        grad[store.slice(node.attrs["name"])] += np.reshape(node.grad, -1)
    return grad


def value_and_grad(expr, store, bindings=None, check_finite=True):
    value = forward(expr, bindings, check_finite=check_finite)
    return value, backward(expr, store)


def relative_error(a, b, floor=1e-6):
    """Componentwise |a - b| / max(|a|, |b|, floor); 0 vs 0 reports 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def numeric_gradient(expr, store, bindings=None, eps=1e-5, indices=None):
    """Central finite differences of ``expr`` w.r.t. store entries."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    indices = np.arange(len(store)) if indices is None else np.asarray(indices)
    saved = store.data.copy()
    out = np.zeros(len(indices))
    try:
        for j, idx in enumerate(indices):
            store.data[idx] = saved[idx] + eps
            f_plus = float(np.sum(forward(expr, bindings, check_finite=False)))
            store.data[idx] = saved[idx] - eps
            f_minus = float(np.sum(forward(expr, bindings, check_finite=False)))
            store.data[idx] = saved[idx]
            out[j] = (f_plus - f_minus) / (2.0 * eps)
    finally:
        store.data[:] = saved
    return out


def check_gradient(expr, store, bindings=None, eps=1e-5, indices=None, details=False):
    """Worst relative error between :func:`backward` and central differences.

    With ``details=True`` also returns (analytic, numeric) for the checked
    indices.
    """
    indices = np.arange(len(store)) if indices is None else np.asarray(indices)
    forward(expr, bindings)
    analytic = backward(expr, store)[indices]
    numeric = numeric_gradient(expr, store, bindings, eps=eps, indices=indices)
    # leave the graph holding values at the unperturbed point
    forward(expr, bindings)
    err = relative_error(analytic, numeric)
    worst = float(err.max()) if err.size else 0.0
    if details:
        return worst, analytic, numeric
    return worst
