"""Answer prediction, matching head and loss composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ops
from .tensor.core import ContractError, ShapeError, Tensor, as_tensor

DEFAULT_LAMBDA = 0.5


@dataclass(frozen=True)
class LossWeights:
    lam: float = DEFAULT_LAMBDA
    csl_enabled: bool = True
    ta_enabled: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("LossWeights.lam must be >= 0")


def fuse_answer(f_av_q, h_q) -> Tensor:
    """Element-wise product of the grounded embedding and the question feature."""
    f_av_q, h_q = as_tensor(f_av_q), as_tensor(h_q)
    if f_av_q.shape != h_q.shape:
        raise ShapeError(f"fuse_answer: {f_av_q.shape} vs {h_q.shape}")
    return ops.mul(f_av_q, h_q)


def answer_logits(e, weight, bias) -> Tensor:
    return ops.linear(e, weight, bias)


def predict(e, weight, bias) -> Tensor:
    """Answer distribution ``softmax(e W + b)`` over the ``C`` candidates."""
    return ops.softmax(answer_logits(e, weight, bias))


def predicted_class(p) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest index."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    return np.argmax(p, axis=-1)


def qa_loss(p, y) -> Tensor:
    """Mean of ``-log p_y`` over rows, with ``p`` clamped below at 1e-12."""
    p = as_tensor(p)
    C = p.shape[-1]
    flat = ops.reshape(p, (-1, C))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != flat.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {flat.shape[0]} predictions")
    if np.any(y < 0) or np.any(y >= C):
        raise ContractError(f"answer label out of range [0, {C})")
    picked = flat[np.arange(flat.shape[0]), y]
    return ops.mul(ops.sum(ops.log(picked, ops.PROB_EPS)), -1.0 / flat.shape[0])


def matching_probability(f_v, f_a, params) -> Tensor:
    """``sigmoid(MLP([f_v; f_a]))`` per segment, shape ``... x T x 1``."""
    f_v, f_a = as_tensor(f_v), as_tensor(f_a)
    if f_v.shape != f_a.shape:
        raise ShapeError(f"matching: {f_v.shape} vs {f_a.shape}")
    x = ops.concat([f_v, f_a], axis=-1)
    hidden = ops.relu(ops.linear(x, params["match.W1"], params["match.b1"]))
    return ops.sigmoid(ops.linear(hidden, params["match.W2"], params["match.b2"]))


def binary_cross_entropy(p, y) -> Tensor:
    """Mean BCE of probabilities ``p`` against 0/1 targets ``y`` (broadcast)."""
    p = as_tensor(p)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), p.shape)
    pos = ops.mul(ops.log(p, ops.PROB_EPS), y)
    neg = ops.mul(ops.log(ops.sub(1.0, p), ops.PROB_EPS), 1.0 - y)
    return ops.mul(ops.sum(ops.add(pos, neg)), -1.0 / p.size)


def matching_loss(f_v, f_a, match_label, params) -> Tensor:
    """Segment-level audio-visual pair matching loss, averaged over segments.

    ``match_label`` holds one 0/1 label per sequence and applies to all of its
    segments.
    """
    p = matching_probability(f_v, f_a, params)
    y = np.asarray(match_label, dtype=np.float64).reshape(p.shape[:-2] + (1, 1))
    return binary_cross_entropy(p, y)


def total_loss(l_qa, l_csl, l_s, weights: LossWeights = LossWeights()) -> Tensor:
    """``L_qa + L_csl + lam * L_s``; the synchrony term is dropped when disabled."""
    total = ops.add(l_qa, ops.mul(l_s, weights.lam))
    if weights.csl_enabled:
        total = ops.add(total, l_csl)
    return total
