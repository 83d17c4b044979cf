"""Two-stage training: matching pretraining, then joint question answering.

Both stages use Adam with a step learning-rate schedule. Minibatches are
drawn from a PCG64 stream keyed on ``(seed, stage, epoch)`` so a run is
bit-reproducible on one worker.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from . import head, jtg, model
from .head import LossWeights
from .model import ModelConfig
from .synth import SplitData, TaskConfig, make_split
from .tensor.core import ShapeError, Tape, Tensor, backward
from .tensor.gradcheck import grad_check_losses
from .tensor.io import read_tensor, write_tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "loss_qa", "loss_csl", "loss_s", "train_acc", "val_acc")
STAGE1_COLUMNS = ("epoch", "lr", "loss_s", "match_acc")
CHECKPOINT_FORMAT = "tjstg-ckpt/1"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    lr0: float = 2e-4
    lr_drop_every: int = 10
    lr_factor: float = 0.1
    stage1_epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr_drop_every < 1 or self.stage1_epochs < 0:
            raise ValueError("TrainConfig sizes must be positive")
        if self.lr0 <= 0:
            raise ValueError("TrainConfig.lr0 must be positive")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("TrainConfig.lr_factor must lie in (0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("TrainConfig.grad_clip must be positive when set")


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """``lr0 * lr_factor ** floor(epoch / lr_drop_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_factor ** (epoch // cfg.lr_drop_every)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0, beta1, beta2, eps,
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / total)


# -- batching ----------------------------------------------------------------------

def as_batch(split: SplitData, rows=None) -> Dict[str, np.ndarray]:
    sel = slice(None) if rows is None else np.asarray(rows)
    return {
        "audio": split.audio[sel],
        "visual_map": split.visual_map[sel],
        "question_words": split.question_words[sel],
        "answer": split.answer[sel],
        "match_audio": split.match_audio[sel],
        "match_label": split.match_label[sel],
    }


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *key])))


def minibatches(n: int, batch_size: int, seed: int, stage: int, epoch: int) -> Iterator[np.ndarray]:
    order = _rng(seed, stage, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _require(split: Optional[SplitData], what: str) -> SplitData:
    if split is None or len(split) == 0:
        raise ValueError(f"{what} split is empty")
    return split


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def metrics_csv(rows: List[dict], columns=METRIC_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


# -- stages --------------------------------------------------------------------------

def train_stage1(
    data: Mapping[str, SplitData],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    params: Optional[Dict[str, Tensor]] = None,
) -> Tuple[Dict[str, Tensor], List[dict]]:
    """Pretrain spatial grounding on audio-visual pair matching (``L_s`` only)."""
    train = _require(data.get("train"), "train")
    params = params if params is not None else model.init_params(mcfg, tcfg.seed)
    state = AdamState.fresh(params, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rows = []
    for epoch in range(tcfg.stage1_epochs):
        lr = lr_schedule(epoch, tcfg)
        tot, n = 0.0, 0
        for idx in minibatches(len(train), tcfg.batch_size, tcfg.seed, 1, epoch):
            batch = as_batch(train, idx)
            with Tape() as tape:
                loss = model.matching_loss(params, mcfg, batch)
            grads = backward(tape, loss, params)
            if tcfg.grad_clip:
                clip_gradients(grads, tcfg.grad_clip)
            adam_step(params, grads, state, lr)
            tot += loss.item() * len(idx)
            n += len(idx)
        hits = matching_accuracy(params, mcfg, train)
        rows.append({"epoch": epoch, "lr": lr, "loss_s": tot / n, "match_acc": hits})
        log.info("stage1 epoch %d lr %.2e loss_s %.4f match_acc %.3f", epoch, lr, tot / n, hits)
    return params, rows


def train_stage2(
    data: Mapping[str, SplitData],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    params: Dict[str, Tensor],
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Tuple[Dict[str, Tensor], List[dict]]:
    """Joint training on ``L_qa + L_csl + lam * L_s`` starting from ``params``."""
    train = _require(data.get("train"), "train")
    val = data.get("val")
    expected = model.param_shapes(mcfg)
    if set(expected) != set(params) or any(params[k].shape != expected[k] for k in expected):
        raise ShapeError("stage-2 parameters do not match the model configuration")
    w = tcfg.weights
    state = AdamState.fresh(params, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rows = []
    for epoch in range(tcfg.epochs):
        lr = lr_schedule(epoch, tcfg)
        sums = {"qa": 0.0, "csl": 0.0, "s": 0.0}
        correct, n = 0, 0
        for idx in minibatches(len(train), tcfg.batch_size, tcfg.seed, 2, epoch):
            batch = as_batch(train, idx)
            with Tape() as tape:
                res = model.forward(params, mcfg, batch)
                loss = head.total_loss(res.losses["qa"], res.losses["csl"], res.losses["s"], w)
            grads = backward(tape, loss, params)
            if tcfg.grad_clip:
                clip_gradients(grads, tcfg.grad_clip)
            adam_step(params, grads, state, lr)
            for k in sums:
                sums[k] += res.losses[k].item() * len(idx)
            correct += int(np.sum(head.predicted_class(res.p).reshape(-1) == batch["answer"]))
            n += len(idx)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_qa": sums["qa"] / n,
            "loss_csl": sums["csl"] / n if w.csl_enabled else 0.0,
            "loss_s": sums["s"] / n,
            "train_acc": correct / n,
            "val_acc": evaluate(params, mcfg, val)["overall"] if val is not None and len(val) else float("nan"),
        }
        rows.append(row)
        log.info("stage2 epoch %d lr %.2e qa %.4f csl %.4f s %.4f train %.3f val %.3f",
                 epoch, lr, row["loss_qa"], row["loss_csl"], row["loss_s"], row["train_acc"], row["val_acc"])
        if on_epoch:
            on_epoch(row)
    return params, rows


def train(data, mcfg: ModelConfig, tcfg: TrainConfig, init: Optional[Dict[str, Tensor]] = None):
    """Stage I (unless ``init`` is given) followed by stage II.

    Returns ``(params, stage1_rows, stage2_rows)``.
    """
    if init is None:
        params, rows1 = train_stage1(data, mcfg, tcfg)
    else:
        params, rows1 = {k: Tensor(v.data.copy(), name=k) for k, v in init.items()}, []
    params, rows2 = train_stage2(data, mcfg, tcfg, params)
    return params, rows1, rows2


# -- evaluation ------------------------------------------------------------------------

def _batched(split: SplitData, size: int = 256):
    for start in range(0, len(split), size):
        rows = np.arange(start, min(len(split), start + size))
        yield rows, as_batch(split, rows)


def predict_split(params, mcfg: ModelConfig, split: SplitData) -> np.ndarray:
    out = [head.predicted_class(model.forward(params, mcfg, b, need_match=False).p).reshape(-1)
           for _, b in _batched(split)]
    return np.concatenate(out)


def evaluate(params, mcfg: ModelConfig, split: Optional[SplitData], predictions=None) -> dict:
    """Answer accuracy overall and per question type.

    ``predictions`` overrides the model (used to score stored or oracle answers).
    """
    split = _require(split, "evaluation")
    pred = predict_split(params, mcfg, split) if predictions is None else np.asarray(predictions)
    hit = pred == split.answer
    types = np.asarray(split.question_type)
    by_type = {t: float(hit[types == t].mean()) for t in sorted(set(split.question_type))}
    return {"overall": float(hit.mean()), "by_type": by_type, "n": int(len(split))}


def matching_accuracy(params, mcfg: ModelConfig, split: SplitData) -> float:
    """Scene-level accuracy of thresholding the mean segment match probability at 0.5."""
    scores = np.concatenate([model.matching_scores(params, mcfg, b) for _, b in _batched(split)])
    return float(np.mean((scores > 0.5) == (split.match_label == 1)))


def modal_weights(params, mcfg: ModelConfig, split: SplitData) -> Tuple[np.ndarray, np.ndarray]:
    """Renormalised ``(w_a, w_v)`` per scene, each ``n x T``."""
    wa, wv = [], []
    for _, b in _batched(split):
        res = model.forward(params, mcfg, b, need_match=False)
        wa.append(res.w_a.data.reshape(len(b["answer"]), -1))
        wv.append(res.w_v.data.reshape(len(b["answer"]), -1))
    return np.concatenate(wa), np.concatenate(wv)


def mean_js(params, mcfg: ModelConfig, split: SplitData) -> float:
    """Mean JS divergence between audio and visual temporal weights over a split."""
    total, n = 0.0, 0
    for _, b in _batched(split):
        res = model.forward(params, mcfg, b, need_match=False)
        total += float(np.sum(jtg.csl_loss(res.w_a, res.w_v).data))
        n += len(b["answer"])
    return total / n


def attention_maps(params, mcfg: ModelConfig, split: SplitData) -> np.ndarray:
    """Combined spatial attention per scene and segment, ``n x T x h x w``."""
    n, T, h, w, _ = split.visual_map.shape
    maps = []
    for _, b in _batched(split):
        q = model.encode_question(params, Tensor(b["question_words"]))
        sp = model.ground(params, mcfg, b, q)
        maps.append(sp.weights.data.reshape(-1, T, h, w))
    return np.concatenate(maps)


def spatial_hit_rate(params, mcfg: ModelConfig, split: SplitData, maps=None) -> float:
    """Fraction of active segments whose max-attention cell is the planted cell."""
    maps = attention_maps(params, mcfg, split) if maps is None else maps
    n, T = maps.shape[:2]
    flat = maps.reshape(n, T, -1)
    gt = split.gt_spatial.reshape(n, T, -1)
    active = split.gt_temporal > 0
    if not active.any():
        raise ValueError("split has no active segments")
    top = np.argmax(flat, axis=-1)
    hits = np.take_along_axis(gt, top[..., None], axis=-1)[..., 0] > 0
    return float(hits[active].mean())


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, Tensor], meta: Optional[dict] = None) -> None:
    """Parameters as TJT1 files under ``path/params`` plus ``path/index.json``."""
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    index = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "params": {}}
    for name, p in params.items():
        rel = f"params/{name}.tjt"
        write_tensor(root / rel, p)
        index["params"][name] = {
            "file": rel,
            "shape": list(p.shape),
            "sha256": hashlib.sha256((root / rel).read_bytes()).hexdigest(),
        }
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Tuple[Dict[str, Tensor], dict]:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    if index.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{root} is not a {CHECKPOINT_FORMAT} checkpoint")
    params = {}
    for name, entry in index["params"].items():
        arr = read_tensor(root / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, index says {entry['shape']}")
        params[name] = Tensor(arr, name=name)
    return params, index["meta"]


def config_dict(mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    return {"model": asdict(mcfg), "train": asdict(tcfg)}


# -- gradient acceptance ---------------------------------------------------------------

TINY_TASK = dict(T=3, N=4, h=2, w=2, d=8, C=3, K=3)
GRADCHECK_LOSSES = ("qa", "csl", "s", "total")


def tiny_gradcheck(seed: int = 0, eps: float = 1e-5, weights: LossWeights = LossWeights(),
                   losses=GRADCHECK_LOSSES) -> Dict[str, Dict[str, float]]:
    """Finite-difference check of every parameter on a tiny model and two scenes.

    Returns ``{loss: {param: max relative error}}`` for the requested losses.
    """
    tcfg = TaskConfig(seed=seed, **TINY_TASK)
    split = make_split(tcfg, 2, 0, neg_fraction=0.5)
    batch = as_batch(split)
    mcfg = ModelConfig(d=tcfg.d, C=tcfg.C)
    params = model.init_params(mcfg, seed)

    def f():
        res = model.forward(params, mcfg, batch)
        out = dict(res.losses)
        out["total"] = head.total_loss(out["qa"], out["csl"], out["s"], weights)
        return {k: out[k] for k in losses}

    return grad_check_losses(f, params, eps)
