"""Dense reverse-mode tensor on top of numpy.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are enabled,
remembers its parents plus a closure mapping the output gradient to one
gradient per parent.  :meth:`Tensor.backward` walks the graph in reverse
topological order.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def power(a, p):
    p = float(p)
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(ad**p, (a,), bw)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# unary nonlinearities
# ---------------------------------------------------------------------------


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def atanh(a):
    ad = a.data
    if np.any(np.abs(ad) >= 1.0):
        raise ValueError("atanh: argument must lie strictly inside (-1, 1)")
    return _make(np.arctanh(ad), (a,), lambda g: (g / (1.0 - ad * ad),))


def relu(a):
    ad = a.data
    return _make(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def gelu(a):
    ad = np.ascontiguousarray(a.data)
    return _make(kernels.gelu_fwd(ad), (a,), lambda g: (kernels.gelu_bwd(np.ascontiguousarray(g), ad),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def amax(a, axis):
    return _extreme(a, axis, np.argmax)


def amin(a, axis):
    return _extreme(a, axis, np.argmin)


def _extreme(a, axis, argfn):
    idx = argfn(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), bw)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            shapes = [t.shape for t in tensors]
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * nd
        grads = []
        for k in range(len(tensors)):
            sl[ax] = slice(bounds[k], bounds[k + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")

    def bw(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    shape = a.shape
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw)


def gather_rows(table, index):
    """Rows of a 2-D ``table`` selected by an integer array of any shape.

    Output shape is ``index.shape + (table.shape[1],)``.
    """
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for table with {n} rows")
    flat = index.reshape(-1)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        kernels.scatter_add_rows(full, flat, np.ascontiguousarray(g.reshape(-1, shape[1])))
        return (full,)

    return _make(table.data[flat].reshape(index.shape + (shape[1],)), (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _pair(a, b)
    # numpy semantics for vectors: promote, multiply, drop the added axis
    if a.ndim == 1 and b.ndim >= 1:
        out = matmul(reshape(a, (1,) + a.shape), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1 and a.ndim >= 2:
        out = matmul(a, reshape(b, b.shape + (1,)))
        return reshape(out, out.shape[:-1])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x, weight, bias=None):
    """x @ weight (+ bias) with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation, softmax, dropout
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    ax = axis % a.ndim
    moved = np.moveaxis(a.data, ax, -1)
    mshape = moved.shape
    y2 = kernels.softmax_fwd(np.ascontiguousarray(moved.reshape(-1, mshape[-1])))
    out = np.moveaxis(y2.reshape(mshape), -1, ax)

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1).reshape(-1, mshape[-1]))
        dx = kernels.softmax_bwd(gm, y2)
        return (np.moveaxis(dx.reshape(mshape), -1, ax),)

    return _make(out, (a,), bw)


def causal_softmax(a):
    """Softmax over the last axis of (..., S, S) scores, keys restricted to j <= i."""
    shape = a.shape
    if len(shape) < 2 or shape[-1] != shape[-2]:
        raise ShapeError(f"causal_softmax: expected (..., S, S), got {shape}")
    s = shape[-1]
    y3 = kernels.causal_softmax_fwd(np.ascontiguousarray(a.data.reshape(-1, s, s)))

    def bw(g):
        dx = kernels.causal_softmax_bwd(np.ascontiguousarray(g.reshape(-1, s, s)), y3)
        return (dx.reshape(shape),)

    return _make(y3.reshape(shape), (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} do not match width {d}")
    shape = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return dx.reshape(shape), dg, db

    return _make(y.reshape(shape), (x, gamma, beta), bw)


def batch_norm(x, gamma, beta, eps=1e-5):
    """Batch statistics over axis 0 of an (N, C) input.

    Returns ``(out, batch_mean, batch_var)``; the caller owns running stats.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: expected (N, C) input with C-wide params, got {x.shape}, {gamma.shape}")
    y, xhat, rstd, mu, var = kernels.batch_norm_fwd(np.ascontiguousarray(x.data), gamma.data, beta.data, eps)

    def bw(g):
        return kernels.batch_norm_bwd(np.ascontiguousarray(g), xhat, rstd, gamma.data)

    return _make(y, (x, gamma, beta), bw), mu, var


def dropout(x, rate, train, rng):
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))
