"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

Every primitive builds its output eagerly and, when any input requires a
gradient, appends a :class:`Node` to the implicit tape. Node indices come
from a process-wide counter, so sorting the nodes reachable from a loss by
index gives a topological order (inputs always precede outputs).

Broadcasting is deliberately limited to scalar-with-tensor. Anything else
has to be made explicit with ``reshape`` / ``matmul`` by a ones column.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import NotScalar, ShapeMismatch

_counter = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One tape entry: the op name, its inputs, output and vjp."""

    __slots__ = ("op", "inputs", "output", "vjp", "index")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.index = next(_counter)

    def __repr__(self):
        return f"Node({self.op}, #{self.index})"


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "node", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operators
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(value, requires_grad=False):
    return Tensor(value, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, inputs, value, vjp):
    out = Tensor(value)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, vjp)
    return out


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    # only scalar-with-tensor broadcasting exists
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# elementwise binary ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    return _record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)),
    )


def power(a, p):
    """Elementwise ``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    av = a.value
    return _record("pow", (a,), av ** p, lambda g: (g * p * av ** (p - 1.0),))


def square(a):
    a = as_tensor(a)
    av = a.value
    return _record("square", (a,), av * av, lambda g: (2.0 * g * av,))


# linear algebra / structure --------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", (a,), a.value.T, lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeMismatch(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, vjp)


def slice_(a, idx):
    a = as_tensor(a)
    out = a.value[idx]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("slice", (a,), np.array(out, dtype=np.float64), vjp)


# reductions -----------------------------------------------------------------

def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("sum", (a,), np.asarray(a.value.sum()),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record("sum", (a,), a.value.sum(axis=ax), vjp)


def mean(a):
    a = as_tensor(a)
    n = a.size
    shape = a.shape
    return _record("mean", (a,), np.asarray(a.value.mean()),
                   lambda g: (np.full(shape, g / n),))


# elementwise unary ----------------------------------------------------------

def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.value
    # split by sign to avoid overflow in exp
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.value
    return _record("log", (a,), np.log(av), lambda g: (g / av,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), out, vjp)


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient passes where the input is inside."""
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _record("clip", (a,), np.clip(av, lo, hi), lambda g: (g * inside,))


def minimum(a, c):
    """Elementwise ``min(a, c)`` against a constant."""
    a = as_tensor(a)
    av = a.value
    keep = av <= c
    return _record("minimum", (a,), np.minimum(av, c), lambda g: (g * keep,))


def ones_rows(b, n):
    """Stack a 1-D tensor ``b`` into ``n`` identical rows (ones column @ b)."""
    b = as_tensor(b)
    return matmul(Tensor(np.ones((n, 1))), reshape(b, (1, b.size)))


# backward ---------------------------------------------------------------------

def tape_of(loss):
    """Nodes reachable from ``loss`` in topological (recording) order."""
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda n: n.index)
    return nodes


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones(loss.shape) if loss.grad is None else loss.grad + 1.0
        return
    adj = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape_of(loss)):
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                adj[key] = gi if key not in adj else adj[key] + gi


# finite-difference checks -------------------------------------------------------

def _max_rel(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f, x, eps=1e-6):
    """Max relative error between the tape gradient of ``f`` at ``x`` and a
    central difference. ``f`` maps a Tensor to a scalar Tensor."""
    x0 = np.array(as_tensor(x).value, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for k in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[k] += eps
            xm[k] -= eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            flat[k] = (fp - fm) / (2 * eps)
    return _max_rel(analytic, numeric)


def grad_check_params(loss_fn, params, eps=1e-6):
    """Like :func:`grad_check` for a closure over existing leaf tensors.

    ``loss_fn()`` is re-evaluated with each parameter entry nudged in place.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros(p.shape)
            numeric = np.zeros(p.shape)
            flat = p.value.reshape(-1)
            nflat = numeric.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = loss_fn().item()
                flat[k] = orig - eps
                fm = loss_fn().item()
                flat[k] = orig
                nflat[k] = (fp - fm) / (2 * eps)
            worst = max(worst, _max_rel(analytic, numeric))
    for p in params:
        p.grad = None
    return worst
