"""Parameter store and the end-to-end forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import head, jtg, tsg
from .tensor import ops
from .tensor.core import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    C: int = 4
    tau: float = tsg.DEFAULT_TAU
    target_aware: bool = True
    order: str = "va"
    heads: int = 1
    renormalize_mask: bool = False
    forget_bias: float = 0.0

    def __post_init__(self):
        if self.d < 1 or self.C < 1:
            raise ValueError("ModelConfig.d and ModelConfig.C must be >= 1")
        if self.tau < 0:
            raise ValueError("ModelConfig.tau must be >= 0")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError("ModelConfig.heads must divide d")
        jtg.Order(self.order)


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    d, C = cfg.d, cfg.C
    shapes = {}
    for lstm in ("q_lstm", "v_lstm", "a_lstm"):
        shapes[f"{lstm}.W_ih"] = (d, 4 * d)
        shapes[f"{lstm}.W_hh"] = (d, 4 * d)
        shapes[f"{lstm}.b"] = (4 * d,)
    shapes.update({
        "q_mlp.W1": (2 * d, d), "q_mlp.b1": (d,), "q_mlp.W2": (d, d), "q_mlp.b2": (d,),
        "audio_proj.W": (d, d), "audio_proj.b": (d,),
        "fuse.W": (2 * d, d), "fuse.b": (d,),
        "attn.W_q": (d, d), "attn.W_k": (d, d),
        "avg_mlp.W1": (d, d), "avg_mlp.b1": (d,), "avg_mlp.W2": (d, d), "avg_mlp.b2": (d,),
        "answer.W": (d, C), "answer.b": (C,),
        "match.W1": (2 * d, d), "match.b1": (d,), "match.W2": (d, 1), "match.b2": (1,),
    })
    return shapes


def _fan_in(name: str, shapes: Dict[str, tuple]) -> int:
    shape = shapes[name]
    if len(shape) == 2:
        return shape[0]
    # biases share the fan-in of their layer's weight
    prefix, leaf = name.rsplit(".", 1)
    for partner in {"b": ("W_ih", "W"), "b1": ("W1",), "b2": ("W2",)}[leaf]:
        if f"{prefix}.{partner}" in shapes:
            return shapes[f"{prefix}.{partner}"][0]
    raise KeyError(name)


def init_params(cfg: ModelConfig, seed: int = 0) -> Dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, drawn in name order."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x1417])))
    shapes = param_shapes(cfg)
    params = {}
    for name in shapes:
        bound = 1.0 / math.sqrt(_fan_in(name, shapes))
        params[name] = Tensor(rng.uniform(-bound, bound, size=shapes[name]), name=name)
    d = cfg.d
    for lstm in ("q_lstm", "v_lstm", "a_lstm"):
        params[f"{lstm}.b"].data[d:2 * d] += cfg.forget_bias
    return params


def encode_question(params, words) -> tsg.QuestionEncoding:
    """Word features, sentence feature, contribution scores and target row."""
    f_q, last = jtg.encode_sequence(words, params["q_lstm.W_ih"], params["q_lstm.W_hh"], params["q_lstm.b"])
    lead = last.shape[:-2]
    flat = ops.reshape(last, lead + (1, 2 * last.shape[-1]))
    h_q = jtg.mlp(flat, params["q_mlp.W1"], params["q_mlp.b1"], params["q_mlp.W2"], params["q_mlp.b2"])
    s = tsg.question_contribution_scores(h_q, f_q)
    idx, f_tgt = tsg.select_target(s, f_q)
    return tsg.QuestionEncoding(f_q, h_q, s, idx, f_tgt)


@dataclass
class ForwardResult:
    question: tsg.QuestionEncoding
    spatial: Optional[tsg.SpatialOutputs] = None
    f_av_q: Optional[Tensor] = None
    w_av: Optional[Tensor] = None
    w_a: Optional[Tensor] = None
    w_v: Optional[Tensor] = None
    p: Optional[Tensor] = None
    losses: Dict[str, Tensor] = field(default_factory=dict)


def _visual(batch) -> np.ndarray:
    vm = np.asarray(batch["visual_map"])
    B, T, h, w, d = vm.shape
    return vm.reshape(B, T, h * w, d)


def ground(params, cfg: ModelConfig, batch, question: tsg.QuestionEncoding, audio_key: str = "audio"):
    return tsg.ground_segments(
        Tensor(batch[audio_key]), Tensor(_visual(batch)), question.f_tgt, params,
        tau=cfg.tau, target_aware=cfg.target_aware, renormalize=cfg.renormalize_mask,
    )


def forward(params, cfg: ModelConfig, batch, need_match: bool = True) -> ForwardResult:
    """Full question-answering pass over a batch dict of stacked arrays.

    ``batch`` needs ``audio``, ``visual_map`` and ``question_words``; with
    ``answer`` the QA loss is added, with ``match_audio``/``match_label`` (and
    ``need_match``) the matching loss on the stored pairs.
    """
    q = encode_question(params, Tensor(batch["question_words"]))
    sp = ground(params, cfg, batch, q)
    v_seq, _ = jtg.encode_sequence(sp.f_v, params["v_lstm.W_ih"], params["v_lstm.W_hh"], params["v_lstm.b"])
    a_seq, _ = jtg.encode_sequence(sp.f_a, params["a_lstm.W_ih"], params["a_lstm.W_hh"], params["a_lstm.b"])
    f_av = jtg.interleave(v_seq, a_seq, cfg.order)
    f_av_q, w_av = jtg.temporal_attention(q.h_q, f_av, params, heads=cfg.heads)
    w_a, w_v = jtg.extract_modal_weights(w_av, cfg.order)
    e = head.fuse_answer(f_av_q, q.h_q)
    p = head.predict(e, params["answer.W"], params["answer.b"])

    res = ForwardResult(q, sp, f_av_q, w_av, w_a, w_v, p)
    res.losses["csl"] = ops.mean(jtg.csl_loss(w_a, w_v))
    if "answer" in batch:
        res.losses["qa"] = head.qa_loss(p, batch["answer"])
    if need_match and "match_audio" in batch:
        res.losses["s"] = matching_loss(params, cfg, batch, q)
    return res


def matching_loss(params, cfg: ModelConfig, batch, question=None) -> Tensor:
    """Pair-matching loss on (visuals, possibly foreign audio) pairs."""
    question = question or encode_question(params, Tensor(batch["question_words"]))
    sp = ground(params, cfg, batch, question, audio_key="match_audio")
    return head.matching_loss(sp.f_v, sp.f_a, batch["match_label"], params)


def matching_scores(params, cfg: ModelConfig, batch) -> np.ndarray:
    """Per-sequence mean matching probability, shape ``B``."""
    question = encode_question(params, Tensor(batch["question_words"]))
    sp = ground(params, cfg, batch, question, audio_key="match_audio")
    return head.matching_probability(sp.f_v, sp.f_a, params).data.mean(axis=(-2, -1))
