"""Differentiable primitives over :class:`~kmap.numcore.tensor.Tensor`.

All ops broadcast like numpy. A shape mismatch raises ``ValueError`` naming
both shapes; a non-finite result raises ``FloatingPointError`` naming the op.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _unbroadcast, as_tensor

_make = Tensor._make


def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    if a2.shape[-1] != b2.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    out = out2
    if ad.ndim == 1:
        out = out[..., 0, :]
    if bd.ndim == 1:
        out = out[..., 0]

    def backward(g):
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,),
                 lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _make(np.expand_dims(x.data, axis), (x,), lambda g: (g.reshape(orig),), "expand_dims")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast_to: incompatible shapes {orig} and {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, orig),), "broadcast_to")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ValueError(f"stack: incompatible shapes {shapes}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "getitem")


def take_rows(table, indices, mask=None) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` at integer ``indices``.

    Positions where ``mask`` is false yield zero vectors and route no
    gradient to the table.
    """
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"take_rows: index out of range for table with {n_rows} rows")
    out = table.data[idx]
    keep = None
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        out = out * keep[..., None]

    def backward(g):
        full = np.zeros(table.shape)
        if keep is None:
            np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        else:
            sel = keep.reshape(-1)
            np.add.at(full, idx.reshape(-1)[sel], g.reshape(-1, table.shape[1])[sel])
        return (full,)

    return _make(out, (table,), backward, "take_rows")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("maximum", a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd

    def backward(g):
        return (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape))

    return _make(np.maximum(ad, bd), (a, b), backward, "maximum")


def min(x, axis: int = -1) -> Tensor:  # noqa: A001
    """Minimum along ``axis``; gradient goes to the first minimiser."""
    x = as_tensor(x)
    arg = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), backward, "min")


def l2_norm(x, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``. Gradient at the origin is taken as 0."""
    x = as_tensor(x)
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (xd * np.expand_dims(scale, axis),)

    return _make(out, (x,), backward, "l2_norm")


def mse(pred, target, axis=None) -> Tensor:
    """Mean squared error; ``axis=None`` averages everything."""
    diff = sub(pred, target)
    return mean(square(diff), axis=axis)


def bce(p, y, eps: float = 0.0) -> Tensor:
    """Elementwise binary cross-entropy of probabilities ``p`` vs labels ``y``."""
    p = as_tensor(p)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    pd = np.clip(p.data, eps, 1.0 - eps) if eps else p.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -(y * np.log(pd) + (1.0 - y) * np.log1p(-pd))

    def backward(g):
        return (g * (pd - y) / (pd * (1.0 - pd)),)

    return _make(out, (p,), backward, "bce")


def bce_with_logits(logits, y) -> Tensor:
    """Binary cross-entropy evaluated from logits (numerically stable)."""
    x = as_tensor(logits)
    y = np.asarray(y, dtype=np.float64)
    xd = x.data
    out = np.maximum(xd, 0.0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))

    def backward(g):
        return (g * (sig - y),)

    return _make(out, (x,), backward, "bce_with_logits")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    shape_a, shape_b = a.shape, b.shape
    out = np.where(c, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(c, g, 0.0), shape_a), _unbroadcast(np.where(c, 0.0, g), shape_b))

    return _make(out, (a, b), backward, "where")


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data.copy())
