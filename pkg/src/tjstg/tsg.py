"""Target-aware spatial grounding.

Finds the question's target word and uses it, together with the audio
segment, to attend over the regions of each segment's visual feature map.
All functions accept leading batch axes: ``f_q`` may be ``N x d`` or
``B x N x d``, probes ``... x 1 x d`` and region maps ``... x hw x d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .tensor import ops
from .tensor.core import ShapeError, Tensor, as_tensor

DEFAULT_TAU = 0.005


@dataclass
class QuestionEncoding:
    f_q: Tensor  # word features, (B x) N x d
    h_q: Tensor  # sentence feature, (B x) 1 x d
    s: Tensor  # contribution scores, (B x) 1 x N
    idx: Union[int, np.ndarray]
    f_tgt: Tensor  # (B x) 1 x d


def _check_last(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"{what}: feature sizes differ, {a.shape} vs {b.shape}")


def question_contribution_scores(h_q, f_q) -> Tensor:
    """Softmax over words of the scaled dot products ``h_q f_q^T / sqrt(d)``."""
    h_q, f_q = as_tensor(h_q), as_tensor(f_q)
    _check_last(h_q, f_q, "question_contribution_scores")
    d = f_q.shape[-1]
    return ops.softmax(ops.mul(ops.matmul(h_q, ops.transpose(f_q)), 1.0 / math.sqrt(d)))


def select_target(s, f_q) -> Tuple[Union[int, np.ndarray], Tensor]:
    """Index of the highest-scoring word (lowest index on ties) and its feature row.

    The argmax is piecewise constant, so gradients reach ``f_q`` only
    through the selected row.
    """
    s, f_q = as_tensor(s), as_tensor(f_q)
    n = f_q.shape[-2]
    if s.shape[-1] != n:
        raise ShapeError(f"select_target: {s.shape[-1]} scores for {n} words")
    if f_q.ndim == 2:
        idx = int(np.argmax(s.data.reshape(-1)))
        return idx, ops.getitem(f_q, slice(idx, idx + 1))
    idx = np.argmax(s.data.reshape(f_q.shape[0], n), axis=-1)
    rows = ops.getitem(f_q, (np.arange(f_q.shape[0]), idx))
    return idx, ops.reshape(rows, (f_q.shape[0], 1, f_q.shape[-1]))


def spatial_attention(probe, f_vm) -> Tensor:
    """Softmax over regions of ``probe · f_vm^T`` (no temperature)."""
    probe, f_vm = as_tensor(probe), as_tensor(f_vm)
    _check_last(probe, f_vm, "spatial_attention")
    return ops.softmax(ops.matmul(probe, ops.transpose(f_vm)))


def threshold_mask(s_q, tau: float = DEFAULT_TAU) -> Tensor:
    """Keep entries with ``s_q >= tau``, zero the rest; the mask is a constant."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    s_q = as_tensor(s_q)
    return ops.mul(s_q, (s_q.data - tau >= 0).astype(np.float64))


def combined_attention(s_a, s_hat_q, renormalize: bool = False) -> Tensor:
    """Softmax of the Hadamard product of the audio and target attention maps.

    With ``renormalize`` the zeroed (below-threshold) regions are excluded
    from the softmax instead of contributing ``exp(0)``.
    """
    s_a, s_hat_q = as_tensor(s_a), as_tensor(s_hat_q)
    if s_a.shape != s_hat_q.shape:
        raise ShapeError(f"attention maps differ in shape: {s_a.shape} vs {s_hat_q.shape}")
    prod = ops.mul(s_a, s_hat_q)
    if renormalize:
        keep = s_hat_q.data > 0
        keep = keep | ~keep.any(axis=-1, keepdims=True)
        prod = ops.add(prod, np.where(keep, 0.0, -1e9))
    return ops.softmax(prod)


def interesting_visual_feature(f_vm, s_a, s_hat_q, renormalize: bool = False) -> Tuple[Tensor, Tensor]:
    """Region features pooled with the combined attention map.

    Returns ``(f_vi, weights)`` with shapes ``... x 1 x d`` and ``... x 1 x hw``.
    """
    f_vm = as_tensor(f_vm)
    weights = combined_attention(s_a, s_hat_q, renormalize)
    if weights.shape[-1] != f_vm.shape[-2]:
        raise ShapeError(f"{weights.shape[-1]} weights for {f_vm.shape[-2]} regions")
    return ops.matmul(weights, f_vm), weights


def global_visual_feature(f_vm) -> Tensor:
    """Unweighted mean over regions, ``... x 1 x d``."""
    return ops.mean(f_vm, axis=-2, keepdims=True)


def fuse_visual(f_vg, f_vi, weight, bias) -> Tensor:
    """``FC(tanh([f_vg; f_vi]))`` with a ``2d x d`` weight."""
    f_vg, f_vi = as_tensor(f_vg), as_tensor(f_vi)
    if f_vg.shape != f_vi.shape:
        raise ShapeError(f"fuse_visual: {f_vg.shape} vs {f_vi.shape}")
    weight = as_tensor(weight)
    if weight.shape[0] != 2 * f_vg.shape[-1]:
        raise ShapeError(f"fuse_visual weight {weight.shape} does not take 2*{f_vg.shape[-1]} inputs")
    return ops.linear(ops.tanh(ops.concat([f_vg, f_vi], axis=-1)), weight, bias)


@dataclass
class SpatialOutputs:
    f_v: Tensor  # fused visual feature per segment, ... x T x d
    f_a: Tensor  # projected audio feature per segment, ... x T x d
    s_a: Tensor
    s_q: Optional[Tensor]
    s_hat_q: Tensor
    weights: Tensor  # combined map, ... x T x 1 x hw


def ground_segments(
    audio: Tensor,
    f_vm: Tensor,
    f_tgt: Optional[Tensor],
    params,
    tau: float = DEFAULT_TAU,
    target_aware: bool = True,
    renormalize: bool = False,
) -> SpatialOutputs:
    """Run spatial grounding on every segment.

    ``audio`` is ``B x T x d`` raw audio, ``f_vm`` is ``B x T x hw x d``,
    ``f_tgt`` is ``B x 1 x d``. With ``target_aware=False`` the target map is
    replaced by ones.
    """
    B, T, hw, d = f_vm.shape
    f_a = ops.linear(audio, params["audio_proj.W"], params["audio_proj.b"])
    s_a = spatial_attention(ops.reshape(f_a, (B, T, 1, d)), f_vm)
    if target_aware:
        s_q = spatial_attention(ops.reshape(f_tgt, (B, 1, 1, d)), f_vm)
        s_hat = threshold_mask(s_q, tau)
    else:
        s_q = None
        s_hat = Tensor(np.ones((B, T, 1, hw)))
    f_vi, weights = interesting_visual_feature(f_vm, s_a, s_hat, renormalize)
    f_v = fuse_visual(global_visual_feature(f_vm), f_vi, params["fuse.W"], params["fuse.b"])
    return SpatialOutputs(ops.reshape(f_v, (B, T, d)), f_a, s_a, s_q, s_hat, weights)
