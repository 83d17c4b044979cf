"""Single-stream joint audio-visual temporal grounding.

Audio and visual segment features are interleaved into one ``2T``-row
sequence, attended to with the question, and the attention weights are split
back per modality for the cross-modal synchrony loss.
"""

from __future__ import annotations

import enum
import math
from typing import Mapping, Tuple

import numpy as np

from .tensor import ops
from .tensor.core import ShapeError, Tensor, as_tensor


class Order(str, enum.Enum):
    VA = "va"  # [v1; a1; v2; a2; ...]
    AV = "av"  # [a1; v1; a2; v2; ...]
    CAT_VA = "cat-va"  # [v1; ...; vT; a1; ...; aT]
    CAT_AV = "cat-av"  # [a1; ...; aT; v1; ...; vT]

    @property
    def interleaved(self) -> bool:
        return self in (Order.VA, Order.AV)


# -- LSTM ---------------------------------------------------------------------

def lstm_cell(x_proj: Tensor, h: Tensor, c: Tensor, W_hh) -> Tuple[Tensor, Tensor]:
    """One step given the precomputed input projection ``x W_ih + b``.

    Gate layout along the last axis is ``[i, f, g, o]``.
    """
    d = h.shape[-1]
    z = ops.add(x_proj, ops.matmul(h, W_hh))
    i = ops.sigmoid(z[..., 0:d])
    f = ops.sigmoid(z[..., d:2 * d])
    g = ops.tanh(z[..., 2 * d:3 * d])
    o = ops.sigmoid(z[..., 3 * d:4 * d])
    c = ops.add(ops.mul(f, c), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    return h, c


def encode_sequence(x, W_ih, W_hh, b) -> Tuple[Tensor, Tensor]:
    """Unidirectional single-layer LSTM from zero state.

    ``x`` is ``L x d_in`` or ``B x L x d_in``. Returns the hidden states
    (``[B x] L x d``) and the last state ``[h_L; c_L]`` (``[B x] 2 x d``).
    """
    x = as_tensor(x)
    W_ih, W_hh = as_tensor(W_ih), as_tensor(W_hh)
    if x.shape[-1] != W_ih.shape[0]:
        raise ShapeError(f"encode_sequence: input {x.shape} vs W_ih {W_ih.shape}")
    d = W_hh.shape[0]
    if W_ih.shape[1] != 4 * d or W_hh.shape[1] != 4 * d:
        raise ShapeError(f"gate weights must have 4*{d} columns")
    unbatched = x.ndim == 2
    if unbatched:
        x = ops.reshape(x, (1,) + x.shape)
    B, L, _ = x.shape
    if L < 1:
        raise ShapeError("encode_sequence needs at least one step")
    xp = ops.linear(x, W_ih, b)
    h = Tensor(np.zeros((B, d)))
    c = Tensor(np.zeros((B, d)))
    hs = []
    for t in range(L):
        h, c = lstm_cell(xp[:, t, :], h, c, W_hh)
        hs.append(h)
    out = ops.stack(hs, axis=1)
    last = ops.stack([h, c], axis=1)
    if unbatched:
        out = ops.reshape(out, (L, d))
        last = ops.reshape(last, (2, d))
    return out, last


def mlp(x, W1, b1, W2, b2) -> Tensor:
    """One ReLU hidden layer followed by an affine output."""
    return ops.linear(ops.relu(ops.linear(x, W1, b1)), W2, b2)


# -- interleaving ---------------------------------------------------------------

def interleave(f_v, f_a, order=Order.VA) -> Tensor:
    """Combine ``T x d`` visual and audio sequences into ``2T x d`` rows."""
    f_v, f_a = as_tensor(f_v), as_tensor(f_a)
    if f_v.shape != f_a.shape:
        raise ShapeError(f"interleave: visual {f_v.shape} vs audio {f_a.shape}")
    order = Order(order)
    *lead, T, d = f_v.shape
    if order is Order.VA:
        return ops.reshape(ops.stack([f_v, f_a], axis=-2), (*lead, 2 * T, d))
    if order is Order.AV:
        return ops.reshape(ops.stack([f_a, f_v], axis=-2), (*lead, 2 * T, d))
    if order is Order.CAT_VA:
        return ops.concat([f_v, f_a], axis=-2)
    return ops.concat([f_a, f_v], axis=-2)


def modality_positions(T: int, order=Order.VA) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices of the visual and audio entries in a ``2T`` sequence."""
    order = Order(order)
    even, odd = np.arange(0, 2 * T, 2), np.arange(1, 2 * T, 2)
    first, second = np.arange(T), np.arange(T, 2 * T)
    return {
        Order.VA: (even, odd),
        Order.AV: (odd, even),
        Order.CAT_VA: (first, second),
        Order.CAT_AV: (second, first),
    }[order]


def deinterleave(f_av, order=Order.VA) -> Tuple[Tensor, Tensor]:
    """Inverse of :func:`interleave`; returns ``(f_v, f_a)``."""
    f_av = as_tensor(f_av)
    if f_av.shape[-2] % 2:
        raise ShapeError(f"deinterleave needs an even row count, got {f_av.shape}")
    vi, ai = modality_positions(f_av.shape[-2] // 2, order)
    return f_av[..., vi, :], f_av[..., ai, :]


# -- attention --------------------------------------------------------------------

def temporal_attention(h_q, f_av, params: Mapping[str, Tensor], heads: int = 1) -> Tuple[Tensor, Tensor]:
    """Question-guided attention over the joint sequence.

    Logits are ``(h_q W_q)(f_av W_k)^T`` with no value projection, so the
    attended output is a convex combination of raw ``f_av`` rows. A mean-pooled
    residual ``MLP(Avg(f_av))`` is added. With ``heads > 1`` each head owns a
    slice of the feature axis and the reported weights are the head average.

    Returns ``(f_av_q, w_av)`` of shapes ``... x 1 x d`` and ``... x 1 x 2T``.
    """
    h_q, f_av = as_tensor(h_q), as_tensor(f_av)
    if h_q.shape[-1] != f_av.shape[-1]:
        raise ShapeError(f"temporal_attention: h_q {h_q.shape} vs f_av {f_av.shape}")
    d = f_av.shape[-1]
    if d % heads:
        raise ShapeError(f"feature size {d} not divisible by {heads} heads")
    q = ops.matmul(h_q, params["attn.W_q"])
    k = ops.matmul(f_av, params["attn.W_k"])
    if heads == 1:
        w_av = ops.softmax(ops.matmul(q, ops.transpose(k)))
        f_att = ops.matmul(w_av, f_av)
    else:
        dh = d // heads
        ws, parts = [], []
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            w = ops.softmax(ops.matmul(q[..., sl], ops.transpose(k[..., sl])))
            ws.append(w)
            parts.append(ops.matmul(w, f_av[..., sl]))
        f_att = ops.concat(parts, axis=-1)
        w_av = ops.mul(_sum_all(ws), 1.0 / heads)
    pooled = ops.mean(f_av, axis=-2, keepdims=True)
    resid = mlp(pooled, params["avg_mlp.W1"], params["avg_mlp.b1"],
                params["avg_mlp.W2"], params["avg_mlp.b2"])
    return ops.add(f_att, resid), w_av


def _sum_all(ts):
    acc = ts[0]
    for t in ts[1:]:
        acc = ops.add(acc, t)
    return acc


def extract_modal_weights(w_av, order=Order.VA, renormalize: bool = True) -> Tuple[Tensor, Tensor]:
    """Per-modality temporal weights ``(w_a, w_v)`` from the joint weights.

    Positions follow the actual sequence layout of ``order``; concatenated
    orders are split by halves. With ``renormalize`` each part is rescaled to
    sum to one.
    """
    w_av = as_tensor(w_av)
    n = w_av.shape[-1]
    if n % 2:
        raise ShapeError(f"joint weights need even length, got {n}")
    vi, ai = modality_positions(n // 2, order)
    w_v, w_a = w_av[..., vi], w_av[..., ai]
    if renormalize:
        w_a = ops.div(w_a, ops.sum(w_a, axis=-1, keepdims=True))
        w_v = ops.div(w_v, ops.sum(w_v, axis=-1, keepdims=True))
    return w_a, w_v


def csl_loss(w_a, w_v) -> Tensor:
    """Cross-modal synchrony loss: JS divergence between the modality weights."""
    return ops.js_divergence(w_a, w_v)


def question_aware_weights(h_q, f_a, f_v) -> Tuple[Tensor, Tensor]:
    """Per-modality question relevance ``softmax(h_q f^T / sqrt(d))`` over time."""
    h_q, f_a, f_v = as_tensor(h_q), as_tensor(f_a), as_tensor(f_v)
    if f_a.shape != f_v.shape or h_q.shape[-1] != f_a.shape[-1]:
        raise ShapeError(f"question_aware_weights: {h_q.shape}, {f_a.shape}, {f_v.shape}")
    scale = 1.0 / math.sqrt(f_a.shape[-1])
    A_q = ops.softmax(ops.mul(ops.matmul(h_q, ops.transpose(f_a)), scale))
    V_q = ops.softmax(ops.mul(ops.matmul(h_q, ops.transpose(f_v)), scale))
    return A_q, V_q

