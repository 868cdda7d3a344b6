"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps one float32/float64 ndarray and, while grad mode is
on, records the operation that produced it together with a backward
rule. ``backward(loss)`` walks the recorded graph once in reverse
topological order and accumulates gradients into every reachable tensor
that has ``requires_grad`` set.

Scope is deliberately small: elementwise arithmetic with singleton-axis
broadcasting, a few reductions, and the shape plumbing the rest of the
project needs. Convolution and sampling kernels live in
``diffcore.kernels``.
"""

import numpy as np

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Incompatible shapes (no valid singleton broadcast)."""


class DomainError(ValueError):
    """Value outside an operation's numeric domain (log/div of <= 0)."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array node in a reverse-mode differentiation graph.

    Attributes:
        data: contiguous row-major ndarray (float32 or float64).
        grad: accumulated gradient of the last backward pass(es), or None.
        requires_grad: whether backward populates ``grad`` on this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    # keep numpy from hijacking mixed ndarray <op> Tensor expressions
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- construction ------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    # -- basic introspection -----------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self._op}{flag})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- reductions / shape --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def backward(self):
        backward(self)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def constant(data, dtype=None):
    """Leaf tensor that never takes gradient."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_dtypes(a, b):
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _broadcast_shape(sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {sa} with {sb}") from exc


def _unbroadcast(grad, shape):
    """Sum ``grad`` back down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ---------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bwd, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._from_op(ad * bd, (a, b), bwd, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a.shape, b.shape)
    if np.any(b.data <= 0):
        raise DomainError("div requires a strictly positive denominator")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * out / bd, b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), bwd, "div")


def minimum(a, b):
    """Elementwise min; gradient ties go to the first argument."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        take_a = ad <= bd
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        )

    return Tensor._from_op(np.minimum(ad, bd), (a, b), bwd, "min")


def maximum(a, b):
    """Elementwise max; gradient ties go to the first argument."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _check_dtypes(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        take_a = ad >= bd
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.shape),
        )

    return Tensor._from_op(np.maximum(ad, bd), (a, b), bwd, "max")


# -- elementwise unary ----------------------------------------------------


def neg(a):
    def bwd(g):
        return (-g,)

    return Tensor._from_op(-a.data, (a,), bwd, "neg")


def absolute(a):
    """|a|; subgradient at 0 is defined as 0."""
    ad = a.data

    def bwd(g):
        return (g * np.sign(ad),)

    return Tensor._from_op(np.abs(ad), (a,), bwd, "abs")


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return Tensor._from_op(np.log(ad), (a,), bwd, "log")


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), bwd, "exp")


def sqrt(a):
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / np.maximum(out, np.finfo(out.dtype).tiny)),)

    return Tensor._from_op(out, (a,), bwd, "sqrt")


def sin(a):
    ad = a.data

    def bwd(g):
        return (g * np.cos(ad),)

    return Tensor._from_op(np.sin(ad), (a,), bwd, "sin")


def cos(a):
    ad = a.data

    def bwd(g):
        return (g * -np.sin(ad),)

    return Tensor._from_op(np.cos(ad), (a,), bwd, "cos")


def sigmoid(a):
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (a,), bwd, "sigmoid")


def relu(a):
    ad = a.data

    def bwd(g):
        return (g * (ad > 0),)

    return Tensor._from_op(np.maximum(ad, 0.0), (a,), bwd, "relu")


def elu(a):
    """Exponential linear unit with alpha = 1."""
    ad = a.data
    neg_mask = ad < 0
    out = ad.copy()
    out[neg_mask] = np.expm1(ad[neg_mask])

    def bwd(g):
        d = np.ones_like(ad)
        d[neg_mask] = out[neg_mask] + 1.0
        return (g * d,)

    return Tensor._from_op(out, (a,), bwd, "elu")


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is 1 on the (closed) interior, 0 outside."""
    if lo is None and hi is None:
        raise ValueError("clamp needs at least one bound")
    ad = a.data
    out = np.clip(ad, lo, hi)

    def bwd(g):
        inside = np.ones_like(ad, dtype=bool)
        if lo is not None:
            inside &= ad >= lo
        if hi is not None:
            inside &= ad <= hi
        return (g * inside,)

    return Tensor._from_op(out, (a,), bwd, "clamp")


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if np.isscalar(axis):
        axis = (int(axis),)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"repeated axis in {axis}")
    return axes


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=axes or None, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else a.size
    if count == 0:
        raise ShapeError("mean over empty axis")
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def amin(a, axis, keepdims=False):
    """Minimum along one axis set; gradient routes to the first argmin."""
    axes = _norm_axes(axis, a.ndim)
    if not axes:
        raise ShapeError("min_over_axis needs a non-empty axis set")
    for ax in axes:
        if a.shape[ax] == 0:
            raise ShapeError("min over empty axis")
    # collapse the reduced axes into one trailing axis
    keep = tuple(i for i in range(a.ndim) if i not in axes)
    perm = keep + axes
    moved = np.transpose(a.data, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmin(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(lead + (1,)), axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(perm)),)

    if keepdims:
        out_shaped = out.reshape([1 if i in axes else a.shape[i] for i in range(a.ndim)])

        def bwd_kd(g):
            return bwd(g.reshape(lead))

        return Tensor._from_op(out_shaped, (a,), bwd_kd, "amin")
    return Tensor._from_op(out, (a,), bwd, "amin")


# -- shape plumbing --------------------------------------------------------


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return Tensor._from_op(a.data.reshape(shape), (a,), bwd, "reshape")


def take(a, idx):
    """Basic (slice/int) indexing; backward scatters into the source shape."""
    out = a.data[idx]
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape, dtype=a.dtype)
        buf[idx] = g
        return (buf,)

    return Tensor._from_op(out, (a,), bwd, "take")


def concat(tensors, axis=0):
    tensors = list(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        _check_dtypes(base, t)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat"
    )


def stack(tensors, axis=0):
    tensors = list(tensors)

    def bwd(g):
        return tuple(np.ascontiguousarray(s) for s in np.moveaxis(g, axis, 0))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, bwd, "stack")


# -- backward pass ---------------------------------------------------------


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The loss must be scalar (every dim of size 1). Repeated calls
    accumulate into existing gradients until they are zeroed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
