"""Differentiable kernels.

Every op accepts Tensors (or array-likes, treated as constants), computes in
float64 and registers a local backward rule on the active tape. Leading axes
broadcast where numpy would; gradients are summed back to operand shapes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import ContractError, ShapeError, Tensor, as_tensor, make_result

#: lower clamp applied to probabilities before any logarithm
PROB_EPS = 1e-12
#: tolerance for the simplex precondition of the divergences
SIMPLEX_TOL = 1e-9


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_result(out, (a, b), back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split on sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,))


def log(x, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` inputs are clamped below at ``eps`` first."""
    x = as_tensor(x)
    if eps > 0:
        keep = x.data >= eps
        xc = np.where(keep, x.data, eps)
        return make_result(np.log(xc), (x,), lambda g: (g * keep / xc,))
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


# -- reductions and shape ----------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=np.float64), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with accumulation."""
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_result(out, (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and p != q for i, (p, q) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return make_result(out, ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return make_result(
        out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """Affine layer ``x @ weight + bias`` with weight stored (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- probability -----------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return make_result(y, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return make_result(y, (x,), lambda g: (g - sm * np.sum(g, axis=axis, keepdims=True),))


def _check_simplex(p: Tensor, what: str) -> None:
    if np.any(p.data < -SIMPLEX_TOL) or np.any(np.abs(p.data.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractError(f"{what} is not a probability simplex along its last axis")


def kl_divergence(p, q) -> Tensor:
    """Sum over the last axis of p * log(p / q), both clamped at ``PROB_EPS``.

    Leading axes are kept, so a batch of pairs gives a batch of divergences.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    return _kl(p, q)


def _kl(p: Tensor, q: Tensor) -> Tensor:
    return sum(mul(p, sub(log(p, PROB_EPS), log(q, PROB_EPS))), axis=-1)


def js_divergence(p, q) -> Tensor:
    """Jensen-Shannon divergence in nats; symmetric and bounded by ln 2."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"js_divergence shape mismatch: {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    m = mul(add(p, q), 0.5)
    return mul(add(_kl(p, m), _kl(q, m)), 0.5)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    flat = reshape(logits, (-1, logits.shape[-1]))
    if labels.shape[0] != flat.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {flat.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= flat.shape[1]):
        raise ContractError("label out of range")
    lp = log_softmax(flat, axis=-1)
    picked = getitem(lp, (np.arange(flat.shape[0]), labels))
    return mul(sum(picked), -1.0 / flat.shape[0])
