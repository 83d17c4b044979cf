"""Synthetic audio-visual question answering scenes with planted ground truth.

A *world* (fixed per seed) holds ``K`` concept vectors, a vocabulary of
filler words and a fixed orthogonal audio map. Each scene picks a target
concept and a set of *active* segments in which the target is both visible
(one grid cell carries the concept vector) and audible (the audio vector is
the audio map applied to the concept). Inactive segments show and play a
distractor concept instead, so every segment holds exactly one object and
only the question tells which segments count.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([seed, stream, index])``; every scene owns its own stream so
scenes can be generated in any order or in parallel with identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from .tensor.io import decode_tensor, write_tensor

_STREAM_WORLD = 0x5701
_STREAM_SCENE = 0x5702
_STREAM_PAIR = 0x5703

QUESTION_TYPES = ("counting", "existential")
MANIFEST_FORMAT = "tjstg-synth/1"

# reference split proportions (train/val/test QA pairs)
SPLIT_PROPORTIONS = (32087, 4595, 9185)


@dataclass(frozen=True)
class TaskConfig:
    T: int = 6
    N: int = 8
    h: int = 4
    w: int = 4
    d: int = 16
    C: int = 4
    K: int = 6
    noise_sigma: float = 0.1
    seed: int = 0
    task: str = "counting"

    def __post_init__(self):
        for name in ("T", "N", "h", "w", "d", "C", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"TaskConfig.{name} must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("TaskConfig.noise_sigma must be >= 0")
        if self.task not in QUESTION_TYPES:
            raise ValueError(f"TaskConfig.task must be one of {QUESTION_TYPES}")
        if self.task == "existential" and self.C < 2:
            raise ValueError("existential task needs C >= 2")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("TaskConfig.seed must fit in 64 bits")

    @property
    def hw(self) -> int:
        return self.h * self.w


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class World:
    concepts: np.ndarray  # K x d, unit rows
    fillers: np.ndarray  # F x d, unit rows
    audio_map: np.ndarray  # d x d orthogonal


def make_world(cfg: TaskConfig) -> World:
    """Concept table, filler vocabulary and audio map for ``cfg.seed``.

    When ``K < d`` the concepts are orthonormal and the fillers live in their
    orthogonal complement.
    """
    rng = _rng(cfg.seed, _STREAM_WORLD)
    d, K = cfg.d, cfg.K
    n_fill = max(4, cfg.N)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    if K < d:
        concepts = q[:, :K].T.copy()
        comp = q[:, K:]
        fillers = rng.standard_normal((n_fill, comp.shape[1])) @ comp.T
    else:
        concepts = rng.standard_normal((K, d))
        fillers = rng.standard_normal((n_fill, d))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    fillers /= np.linalg.norm(fillers, axis=1, keepdims=True)
    a, r = np.linalg.qr(rng.standard_normal((d, d)))
    audio_map = a * np.sign(np.diag(r))
    return World(concepts, fillers, audio_map)


@dataclass
class SyntheticScene:
    audio: np.ndarray  # T x d
    visual_map: np.ndarray  # T x h x w x d
    question_words: np.ndarray  # N x d
    target_word_index: int
    target_concept: int
    gt_spatial: np.ndarray  # T x h x w, binary
    gt_temporal: np.ndarray  # T, binary
    answer: int
    question_type: str = "counting"
    match_label: int = 1


def activation_distribution(cfg: TaskConfig) -> np.ndarray:
    """Probability of each active-segment count 0..T under the generator.

    Answer classes are drawn uniformly and the active count is then uniform
    within the class.
    """
    T = cfg.T
    p = np.zeros(T + 1)
    if cfg.task == "counting":
        levels = min(cfg.C, T + 1)
        for cls in range(levels):
            if cls < cfg.C - 1:
                p[cls] += 1.0 / levels
            else:
                p[cls:] += 1.0 / levels / (T + 1 - cls)
    else:
        p[0] = 0.5
        p[1:] = 0.5 / T
    return p


def answer_for(cfg: TaskConfig, n_active: int) -> int:
    if cfg.task == "counting":
        return min(cfg.C - 1, int(n_active))
    return int(n_active > 0)


def gen_scene(cfg: TaskConfig, index: int, world: Optional[World] = None) -> SyntheticScene:
    """Scene number ``index`` of the stream defined by ``cfg.seed``."""
    world = world or make_world(cfg)
    rng = _rng(cfg.seed, _STREAM_SCENE, index)
    T, N, h, w, d, K = cfg.T, cfg.N, cfg.h, cfg.w, cfg.d, cfg.K
    hw = h * w
    sigma = cfg.noise_sigma

    target = int(rng.integers(K))
    # n_active ~ activation_distribution(cfg)
    n_active = int(rng.choice(T + 1, p=activation_distribution(cfg)))
    active = np.zeros(T, dtype=bool)
    active[rng.choice(T, size=n_active, replace=False)] = True
    others = [k for k in range(K) if k != target]

    visual = sigma * rng.standard_normal((T, hw, d))
    audio = sigma * rng.standard_normal((T, d))
    gt_spatial = np.zeros((T, hw))
    for t in range(T):
        # one object per segment: the target when active, a distractor otherwise
        sounding = target if active[t] else (int(rng.choice(others)) if others else None)
        cells = rng.permutation(hw)
        if sounding is not None:
            visual[t, cells[0]] += world.concepts[sounding]
            audio[t] += world.audio_map @ world.concepts[sounding]
        if active[t]:
            gt_spatial[t, cells[0]] = 1.0

    n_fill = world.fillers.shape[0]
    qtype = cfg.task
    if N >= 2:
        tpos = int(rng.integers(1, N))
        idx = rng.integers(2, n_fill, size=N)
        idx[0] = QUESTION_TYPES.index(qtype)
    else:
        tpos = 0
        idx = np.zeros(1, dtype=int)
    words = world.fillers[idx].copy()
    words[tpos] = world.concepts[target]
    words += sigma * rng.standard_normal((N, d))

    return SyntheticScene(
        audio=audio,
        visual_map=visual.reshape(T, h, w, d),
        question_words=words,
        target_word_index=tpos,
        target_concept=target,
        gt_spatial=gt_spatial.reshape(T, h, w),
        gt_temporal=active.astype(np.float64),
        answer=answer_for(cfg, n_active),
        question_type=qtype,
    )


@dataclass
class SplitData:
    """Stacked arrays for one split; row ``i`` is one scene."""

    ids: List[str]
    audio: np.ndarray
    visual_map: np.ndarray
    question_words: np.ndarray
    target_word_index: np.ndarray
    gt_spatial: np.ndarray
    gt_temporal: np.ndarray
    answer: np.ndarray
    question_type: List[str]
    match_audio: np.ndarray
    match_label: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, rows) -> "SplitData":
        rows = np.asarray(rows, dtype=np.intp)
        kw = {}
        for f in self.__dataclass_fields__:
            v = getattr(self, f)
            kw[f] = [v[i] for i in rows] if isinstance(v, list) else v[rows]
        return SplitData(**kw)


def _pairing(cfg: TaskConfig, indices: Sequence[int], neg_fraction: float) -> List[int]:
    """Partner (global index) whose audio is paired with each scene's visuals."""
    out = []
    for i in indices:
        rng = _rng(cfg.seed, _STREAM_PAIR, i)
        if len(indices) > 1 and rng.random() < neg_fraction:
            pool = [j for j in indices if j != i]
            out.append(int(pool[rng.integers(len(pool))]))
        else:
            out.append(int(i))
    return out


def make_split(
    cfg: TaskConfig, n: int, offset: int = 0, neg_fraction: float = 0.5, prefix: str = "s"
) -> SplitData:
    """Generate scenes ``offset .. offset+n-1`` in memory, with matching pairs."""
    if n < 1:
        raise ValueError("split size must be >= 1")
    world = make_world(cfg)
    indices = list(range(offset, offset + n))
    scenes = [gen_scene(cfg, i, world) for i in indices]
    partners = _pairing(cfg, indices, neg_fraction)
    audio = np.stack([s.audio for s in scenes])
    return SplitData(
        ids=[f"{prefix}{i:06d}" for i in indices],
        audio=audio,
        visual_map=np.stack([s.visual_map for s in scenes]),
        question_words=np.stack([s.question_words for s in scenes]),
        target_word_index=np.array([s.target_word_index for s in scenes]),
        gt_spatial=np.stack([s.gt_spatial for s in scenes]),
        gt_temporal=np.stack([s.gt_temporal for s in scenes]),
        answer=np.array([s.answer for s in scenes]),
        question_type=[s.question_type for s in scenes],
        match_audio=audio[[j - offset for j in partners]],
        match_label=np.array([int(j == i) for i, j in zip(indices, partners)]),
    )


def split_sizes(total: int) -> tuple:
    """Split ``total`` scenes with the reference train/val/test proportions."""
    ref = np.array(SPLIT_PROPORTIONS, dtype=float)
    sizes = np.maximum(1, np.floor(total * ref / ref.sum()).astype(int))
    sizes[0] = max(1, total - sizes[1] - sizes[2])
    return tuple(int(s) for s in sizes)


# -- on-disk dataset ---------------------------------------------------------

_SCENE_FILES = ("audio", "visual_map", "question_words", "gt_spatial", "gt_temporal")

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "config", "neg_fraction", "splits", "scenes"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": MANIFEST_FORMAT},
        "config": {
            "type": "object",
            "required": ["T", "N", "h", "w", "d", "C", "K", "noise_sigma", "seed", "task"],
        },
        "neg_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "splits": {
            "type": "object",
            "required": ["train", "val", "test"],
            "additionalProperties": {"type": "integer", "minimum": 1},
        },
        "scenes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": [
                    "id", "split", "index", "files", "sha256", "answer", "question_type",
                    "target_word_index", "target_concept", "gt_temporal", "gt_spatial_cells",
                    "match_label", "match_audio_from",
                ],
                "properties": {
                    "id": {"type": "string"},
                    "split": {"enum": ["train", "val", "test"]},
                    "index": {"type": "integer", "minimum": 0},
                    "files": {
                        "type": "object",
                        "required": list(_SCENE_FILES),
                        "additionalProperties": {"type": "string"},
                    },
                    "sha256": {"type": "object", "additionalProperties": {"type": "string"}},
                    "answer": {"type": "integer", "minimum": 0},
                    "question_type": {"enum": list(QUESTION_TYPES)},
                    "target_word_index": {"type": "integer", "minimum": 0},
                    "target_concept": {"type": "integer", "minimum": 0},
                    "gt_temporal": {"type": "array", "items": {"enum": [0, 1]}},
                    "gt_spatial_cells": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    },
                    "match_label": {"enum": [0, 1]},
                    "match_audio_from": {"type": "string"},
                },
            },
        },
    },
}


def gen_dataset(
    cfg: TaskConfig,
    n_train: int,
    n_val: int,
    n_test: int,
    out_dir,
    neg_fraction: float = 0.5,
) -> dict:
    """Write all splits as TJT1 files under ``out_dir`` plus ``manifest.json``.

    Returns the manifest. Scene indices run consecutively across splits so
    no two splits share a scene.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one scene")
    if not 0.0 <= neg_fraction <= 1.0:
        raise ValueError("neg_fraction must lie in [0, 1]")
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)

    world = make_world(cfg)
    entries = []
    offset = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        indices = list(range(offset, offset + n))
        partners = _pairing(cfg, indices, neg_fraction)
        for i, j in zip(indices, partners):
            scene = gen_scene(cfg, i, world)
            sid = f"{split}_{i:06d}"
            files, digests = {}, {}
            for key in _SCENE_FILES:
                rel = f"scenes/{sid}.{key}.tjt"
                write_tensor(out / rel, getattr(scene, key))
                files[key] = rel
                digests[key] = hashlib.sha256((out / rel).read_bytes()).hexdigest()
            active = np.flatnonzero(scene.gt_temporal)
            cells = [[int(t), int(np.argmax(scene.gt_spatial[t].reshape(-1)))] for t in active]
            entries.append({
                "id": sid,
                "split": split,
                "index": i,
                "files": files,
                "sha256": digests,
                "answer": scene.answer,
                "question_type": scene.question_type,
                "target_word_index": scene.target_word_index,
                "target_concept": scene.target_concept,
                "gt_temporal": [int(v) for v in scene.gt_temporal],
                "gt_spatial_cells": cells,
                "match_label": int(i == j),
                "match_audio_from": f"{split}_{j:06d}",
            })
        offset += n

    manifest = {
        "format": MANIFEST_FORMAT,
        "config": asdict(cfg),
        "neg_fraction": neg_fraction,
        "splits": {"train": n_train, "val": n_val, "test": n_test},
        "scenes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class ManifestError(ValueError):
    """A dataset manifest or one of its files does not match the documented layout."""


def validate_manifest(manifest: dict) -> None:
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ManifestError(f"manifest invalid at {where}: {exc.message}") from None


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    validate_manifest(manifest)
    return manifest


def load_dataset(path) -> Dict[str, SplitData]:
    """Read a dataset written by :func:`gen_dataset` into per-split arrays."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    manifest = load_manifest(path)
    by_id = {e["id"]: e for e in manifest["scenes"]}
    cache: Dict[str, Dict[str, np.ndarray]] = {}

    def arrays(sid):
        if sid not in cache:
            e = by_id[sid]
            cache[sid] = {}
            for k in _SCENE_FILES:
                raw = (root / e["files"][k]).read_bytes()
                if hashlib.sha256(raw).hexdigest() != e["sha256"].get(k):
                    raise ManifestError(f"checksum mismatch for {e['files'][k]}")
                cache[sid][k] = decode_tensor(raw)
        return cache[sid]

    out = {}
    for split in ("train", "val", "test"):
        rows = [e for e in manifest["scenes"] if e["split"] == split]
        if not rows:
            continue
        loaded = [arrays(e["id"]) for e in rows]
        out[split] = SplitData(
            ids=[e["id"] for e in rows],
            audio=np.stack([a["audio"] for a in loaded]),
            visual_map=np.stack([a["visual_map"] for a in loaded]),
            question_words=np.stack([a["question_words"] for a in loaded]),
            target_word_index=np.array([e["target_word_index"] for e in rows]),
            gt_spatial=np.stack([a["gt_spatial"] for a in loaded]),
            gt_temporal=np.stack([a["gt_temporal"] for a in loaded]),
            answer=np.array([e["answer"] for e in rows]),
            question_type=[e["question_type"] for e in rows],
            match_audio=np.stack([arrays(e["match_audio_from"])["audio"] for e in rows]),
            match_label=np.array([e["match_label"] for e in rows]),
        )
    return out


def dataset_config(path) -> TaskConfig:
    return TaskConfig(**load_manifest(path)["config"])
