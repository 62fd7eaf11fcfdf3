"""Tensor type, primitive ops, and the reverse pass.

Every primitive builds the output array eagerly with numpy, verifies it is
finite, and (when gradients are enabled and an input requires them) attaches
the parent tensors plus a vjp closure. `backward` topologically sorts the
graph hanging off a scalar root and pushes cotangents down to the leaves.

Broadcasting follows numpy's trailing-dimension alignment; vjps are
responsible for summing gradients back down to their input's exact shape.
"""

from __future__ import annotations

import numpy as np

_FLOAT_KINDS = ("f",)


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf; raised immediately, never propagated."""

    def __init__(self, op):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class TapeConsumedError(RuntimeError):
    """backward() was already run from this root."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind not in _FLOAT_KINDS:
        arr = arr.astype(np.float64)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _ensure_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op)


# ops whose outputs are rearrangements or bounded maps of already-verified
# inputs; they cannot introduce a non-finite value, so _node skips the scan
_FINITE_SAFE_OPS = frozenset(
    {
        "slice", "gather", "reshape", "transpose", "broadcast",
        "concat", "pad", "neg", "relu", "sigmoid", "select",
    }
)


class Tensor:
    """Dense real array node; leaves may accumulate a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        _ensure_finite(self.data, "constant")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.requires_grad})"

    # arithmetic sugar; scalars are coerced to the tensor's dtype
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

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _node(data, op, parents, vjp):
    """Wrap a forward result; records parents/vjp only when a grad path exists."""
    if op not in _FINITE_SAFE_OPS:
        _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._done = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if isinstance(like, Tensor) else None))


def constant(data, dtype=None):
    """A tensor that never takes gradient."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def stop_gradient(x):
    """Detach: same values, no tape connection."""
    if isinstance(x, Tensor):
        return Tensor(x.data)
    return Tensor(x)


def _unbroadcast(g, shape):
    """Sum a cotangent down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a = _coerce(a, b)
    b = _coerce(b, a)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _node(out, "add", (a, b), vjp)


def sub(a, b):
    a = _coerce(a, b)
    b = _coerce(b, a)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _node(out, "sub", (a, b), vjp)


def mul(a, b):
    a = _coerce(a, b)
    b = _coerce(b, a)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, "mul", (a, b), vjp)


def div(a, b):
    a = _coerce(a, b)
    b = _coerce(b, a)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(out, "div", (a, b), vjp)


def neg(a):
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    out = np.log(a.data)
    return _node(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (g * (0.5 / out),))


def square(a):
    return _node(a.data * a.data, "square", (a,), lambda g: (g * (2.0 * a.data),))


def relu(a):
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def elu(a, alpha=1.0):
    pos = a.data > 0
    expm = np.where(pos, 0.0, np.expm1(np.minimum(a.data, 0.0)))
    out = np.where(pos, a.data, alpha * expm)

    def vjp(g):
        return (g * np.where(pos, 1.0, alpha * (expm + 1.0)),)

    return _node(out, "elu", (a,), vjp)


def sigmoid(a):
    # stable in both tails
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, "sigmoid", (a,), vjp)


def softplus(a):
    out = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)

    def vjp(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        e = np.exp(a.data[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _node(out, "softplus", (a,), vjp)


def matmul(a, b):
    a = _coerce(a, b)
    b = _coerce(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _node(out, "matmul", (a, b), vjp)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(np.asarray(out), "sum", (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _node(np.asarray(out), "mean", (a,), vjp)


def cumsum(a, axis=-1):
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(out, "cumsum", (a,), vjp)


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, "concat", tuple(tensors), vjp)


def _key_has_array(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in parts)


def take(a, key):
    """Indexing/slicing/gather; integer-array keys scatter-add on the way back."""
    out = a.data[key]
    fancy = _key_has_array(key)

    def vjp(g):
        gx = np.zeros_like(a.data)
        if fancy:
            np.add.at(gx, key, g)  # repeated indices must accumulate
        else:
            gx[key] += g
        return (gx,)

    return _node(np.asarray(out), "slice", (a,), vjp)


def gather(a, idx, axis=0):
    """Row gather along `axis` with a constant integer index array."""
    if axis != 0:
        raise ValueError("gather only supports axis=0")
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise ValueError("gather index must be one-dimensional")
    out = a.data[idx]
    rows = a.shape[0]
    cols = int(np.prod(a.shape[1:], dtype=np.int64)) if a.data.ndim > 1 else 1

    def vjp(g):
        # bincount-based scatter-add; much faster than np.add.at
        if cols == 1 and a.data.ndim == 1:
            acc = np.bincount(idx, weights=g, minlength=rows)
            return (acc.astype(a.data.dtype, copy=False),)
        flat = (idx[:, None] * cols + np.arange(cols)).ravel()
        acc = np.bincount(
            flat, weights=g.reshape(len(idx), cols).ravel(), minlength=rows * cols
        )
        return (acc.astype(a.data.dtype, copy=False).reshape(a.shape),)

    return _node(out, "gather", (a,), vjp)


def pad(a, pad_width):
    """Zero padding; pad_width follows np.pad's per-axis (before, after) form."""
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    out = np.pad(a.data, pw)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.data.shape))

    def vjp(g):
        return (g[slices],)

    return _node(out, "pad", (a,), vjp)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, "reshape", (a,), vjp)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _node(out, "transpose", (a,), vjp)


def moveaxis(a, source, destination):
    axes = list(range(a.data.ndim))
    axes.insert(destination % a.data.ndim, axes.pop(source % a.data.ndim))
    return transpose(a, axes)


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _node(out, "broadcast", (a,), vjp)


def where_mask(mask, a, b):
    """Comparison-free select: mask is a precomputed constant 0/1 array."""
    a = _coerce(a, b)
    b = _coerce(b, a)
    m = np.asarray(mask, dtype=a.dtype)
    out = m * a.data + (1.0 - m) * b.data

    def vjp(g):
        return (_unbroadcast(g * m, a.data.shape), _unbroadcast(g * (1.0 - m), b.data.shape))

    return _node(out, "select", (a, b), vjp)


def clamp_min(a, floor):
    """max(a, floor) for a constant floor, via relu so the vjp stays exact."""
    return add(relu(sub(a, floor)), floor)


# registry so tests can sweep every primitive, and so a symbolic op-kind
# dispatch exists for callers that want one
OP_REGISTRY = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "matmul": matmul,
    "sum": tsum,
    "mean": tmean,
    "cumsum": cumsum,
    "concat": concat,
    "slice": take,
    "gather": gather,
    "pad": pad,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "select": where_mask,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch a primitive by name. Unknown kinds raise KeyError."""
    return OP_REGISTRY[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(root):
    """Accumulate d(root)/d(leaf) into every reachable grad-requiring leaf.

    The root must be a scalar produced on the live tape; running the pass a
    second time from the same root is an error.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if root._done:
        raise TapeConsumedError("tape already consumed: backward was run from this root")

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = gp if prev is None else prev + gp

    root._done = True
