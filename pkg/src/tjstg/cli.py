"""Command-line interface: ``tjstg {gen,train,eval,gradcheck,dump-attn}``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then flags (flags win). Exit codes: 0 success, 1 usage, 2 I/O,
3 contract violation, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import synth, train
from .head import DEFAULT_LAMBDA, LossWeights
from .jtg import Order
from .model import ModelConfig
from .tensor.core import ContractError, ShapeError
from .tensor.gradcheck import NonDeterministicError
from .tensor.io import TensorFormatError
from .tsg import DEFAULT_TAU

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONTRACT, EXIT_GRADCHECK = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-4

log = logging.getLogger("tjstg")


class UsageError(Exception):
    """Bad flags or config values."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# Defaults live here rather than in argparse so a config file can sit between
# them and the command line.
DEFAULTS: Dict[str, Dict[str, object]] = {
    "gen": {
        "seed": 0, "t": 6, "n_words": 8, "grid": "4x4", "dim": 16, "classes": 6,
        "answers": 4, "noise": 0.1, "task": "counting", "train": 2000, "val": 250,
        "test": 250, "neg_fraction": 0.5,
    },
    "train": {
        "seed": 0, "tau": DEFAULT_TAU, "lambda": DEFAULT_LAMBDA, "no_csl": False, "no_ta": False,
        "interleave_order": "va", "epochs": 30, "stage1_epochs": 10, "lr": 2e-4,
        "lr_drop_every": 10, "batch": train.TrainConfig.batch_size, "stage2_only": False,
        "init": None, "heads": 1, "renormalize_mask": False,
    },
    "eval": {"seed": 0, "split": "test"},
    "gradcheck": {"seed": 0, "eps": 1e-5},
    "dump-attn": {"seed": 0, "split": "test", "limit": 8},
}


def _grid(value: str):
    parts = str(value).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"grid must look like 4 or 4x4, got {value!r}") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2:
        raise UsageError(f"grid must look like 4 or 4x4, got {value!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tjstg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=False):
        sp.add_argument("--config", type=Path, help="JSON file of settings (flags override it)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")

    g = sub.add_parser("gen", help="write a synthetic dataset")
    common(g, out_required=True)
    g.add_argument("--t", type=int, help="segments per scene")
    g.add_argument("--n-words", type=int, help="words per question")
    g.add_argument("--grid", help="spatial grid, e.g. 4x4")
    g.add_argument("--dim", type=int, help="feature dimension")
    g.add_argument("--classes", type=int, help="number of concept classes")
    g.add_argument("--answers", type=int, help="answer vocabulary size")
    g.add_argument("--noise", type=float, help="Gaussian noise scale")
    g.add_argument("--task", choices=synth.QUESTION_TYPES)
    g.add_argument("--train", type=int, help="training scenes")
    g.add_argument("--val", type=int, help="validation scenes")
    g.add_argument("--test", type=int, help="test scenes")
    g.add_argument("--neg-fraction", type=float, help="share of mismatched matching pairs")

    t = sub.add_parser("train", help="two-stage training")
    common(t, out_required=True)
    t.add_argument("--data", type=Path, required=True, help="dataset directory from `gen`")
    t.add_argument("--tau", type=float)
    t.add_argument("--lambda", type=float, dest="lambda")
    t.add_argument("--no-csl", action="store_const", const=True)
    t.add_argument("--no-ta", action="store_const", const=True)
    t.add_argument("--interleave-order", choices=[o.value for o in Order])
    t.add_argument("--epochs", type=int)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-drop-every", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--renormalize-mask", action="store_const", const=True)
    t.add_argument("--stage2-only", action="store_const", const=True)
    t.add_argument("--init", type=Path, help="checkpoint to start stage II from")

    e = sub.add_parser("eval", help="answer accuracy of a checkpoint")
    common(e)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--split", choices=("train", "val", "test"))

    gc = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    common(gc)
    gc.add_argument("--eps", type=float)

    d = sub.add_parser("dump-attn", help="write attention heatmaps and weights")
    common(d, out_required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--ckpt", type=Path, required=True)
    d.add_argument("--split", choices=("train", "val", "test"))
    d.add_argument("--limit", type=int, help="scenes to render as PGM (CSV covers all)")
    return p


def resolve(args: argparse.Namespace) -> Dict[str, object]:
    """Defaults, then the config file, then explicit flags."""
    settings = dict(DEFAULTS[args.command])
    if args.config is not None:
        text = Path(args.config).read_text()
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        for key, value in loaded.items():
            norm = key.replace("-", "_")
            if norm not in settings:
                raise UsageError(f"config field {key!r} is not a {args.command} setting")
            settings[norm] = value
    for key, value in vars(args).items():
        if key in settings and value is not None:
            settings[key] = value
    return settings


def _positive(settings, *names):
    for n in names:
        v = settings[n]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
            raise UsageError(f"{n} must be a positive number, got {v!r}")


# -- subcommands -------------------------------------------------------------------

def cmd_gen(args, s) -> int:
    h, w = _grid(s["grid"])
    try:
        cfg = synth.TaskConfig(
            T=s["t"], N=s["n_words"], h=h, w=w, d=s["dim"], C=s["answers"], K=s["classes"],
            noise_sigma=float(s["noise"]), seed=s["seed"], task=s["task"],
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    for n in ("train", "val", "test"):
        if isinstance(s[n], bool) or not isinstance(s[n], int) or s[n] < 1:
            raise UsageError(f"{n} must be a positive integer")
    if not 0 <= s["neg_fraction"] <= 1:
        raise UsageError("neg_fraction must lie in [0, 1]")
    manifest = synth.gen_dataset(cfg, s["train"], s["val"], s["test"], args.out, s["neg_fraction"])
    print(f"wrote {sum(manifest['splits'].values())} scenes to {args.out}")
    return EXIT_OK


def configs_from(s, task: synth.TaskConfig):
    _positive(s, "epochs", "lr", "batch", "lr_drop_every")
    try:
        mcfg = ModelConfig(
            d=task.d, C=task.C, tau=float(s["tau"]), target_aware=not s["no_ta"],
            order=s["interleave_order"], heads=int(s["heads"]),
            renormalize_mask=bool(s["renormalize_mask"]),
        )
        tcfg = train.TrainConfig(
            batch_size=int(s["batch"]), epochs=int(s["epochs"]), lr0=float(s["lr"]),
            lr_drop_every=int(s["lr_drop_every"]), stage1_epochs=int(s["stage1_epochs"]),
            seed=int(s["seed"]),
            weights=LossWeights(lam=float(s["lambda"]), csl_enabled=not s["no_csl"], ta_enabled=not s["no_ta"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return mcfg, tcfg


def cmd_train(args, s) -> int:
    if s["stage2_only"] and not s["init"]:
        raise UsageError("--stage2-only needs --init CHECKPOINT")
    data = synth.load_dataset(args.data)
    task = synth.dataset_config(args.data)
    mcfg, tcfg = configs_from(s, task)
    init = None
    if s["init"]:
        init, _ = train.load_checkpoint(s["init"])
    if init is not None and not s["stage2_only"]:
        raise UsageError("--init is only used together with --stage2-only")
    params, rows1, rows2 = train.train(data, mcfg, tcfg, init=init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(train.metrics_csv(rows2))
    if rows1:
        (out / "stage1_metrics.csv").write_text(train.metrics_csv(rows1, train.STAGE1_COLUMNS))
    meta = train.config_dict(mcfg, tcfg)
    meta["task"] = asdict(task)
    train.save_checkpoint(out / "checkpoint", params, meta)
    if rows2:
        last = rows2[-1]
        print(f"final train_acc {last['train_acc']:.4f} val_acc {last['val_acc']:.4f}")
    return EXIT_OK


def _model_from_checkpoint(path):
    params, meta = train.load_checkpoint(path)
    try:
        mcfg = ModelConfig(**meta["model"])
    except (KeyError, TypeError) as exc:
        raise ContractError(f"checkpoint {path} lacks a usable model config: {exc}") from None
    return params, mcfg


def _split(args, s):
    data = synth.load_dataset(args.data)
    split = data.get(s["split"])
    if split is None or len(split) == 0:
        raise UsageError(f"dataset has no {s['split']} scenes")
    return split


def cmd_eval(args, s) -> int:
    params, mcfg = _model_from_checkpoint(args.ckpt)
    split = _split(args, s)
    result = train.evaluate(params, mcfg, split)
    result["split"] = s["split"]
    result["mean_js"] = train.mean_js(params, mcfg, split)
    text = json.dumps(result, indent=1, sort_keys=True)
    print(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(text + "\n")
    return EXIT_OK


def format_gradcheck(report: Dict[str, Dict[str, float]]) -> List[str]:
    """One line per parameter: error for each loss and the maximum."""
    losses = list(report)
    names = sorted(report[losses[0]]) if losses else []
    width = max([len(n) for n in names] + [9])
    lines = [f"{'parameter':<{width}}  " + "  ".join(f"{'L_' + k:>9}" for k in losses) + "        max  status"]
    for n in names:
        errs = [report[k][n] for k in losses]
        worst = max(errs)
        status = "ok" if worst < GRADCHECK_TOL else "FAIL"
        lines.append(f"{n:<{width}}  " + "  ".join(f"{e:9.2e}" for e in errs) + f"  {worst:9.2e}  {status}")
    return lines


def cmd_gradcheck(args, s) -> int:
    _positive(s, "eps")
    report = train.tiny_gradcheck(seed=int(s["seed"]), eps=float(s["eps"]))
    lines = format_gradcheck(report)
    print("\n".join(lines))
    worst = max(max(r.values()) for r in report.values())
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_GRADCHECK


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Plain (P2) greyscale image, min-max scaled to 0..255."""
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros(image.shape, dtype=int) if hi <= lo else np.rint((image - lo) / (hi - lo) * 255).astype(int)
    h, w = image.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in scaled)
    path.write_text(f"P2\n{w} {h}\n255\n{rows}\n")


def cmd_dump_attn(args, s) -> int:
    params, mcfg = _model_from_checkpoint(args.ckpt)
    split = _split(args, s)
    maps = train.attention_maps(params, mcfg, split)
    w_a, w_v = train.modal_weights(params, mcfg, split)
    out = Path(args.out)
    (out / "pgm").mkdir(parents=True, exist_ok=True)
    n, T, h, w = maps.shape
    limit = max(0, int(s["limit"]))
    for i in range(min(n, limit)):
        for t in range(T):
            write_pgm(out / "pgm" / f"{split.ids[i]}_t{t}.pgm", maps[i, t])
    with open(out / "spatial_weights.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["scene", "segment", "active", "gt_cell", "max_cell"] + [f"w{r}_{c}" for r in range(h) for c in range(w)])
        for i in range(n):
            for t in range(T):
                flat = maps[i, t].reshape(-1)
                gt = np.flatnonzero(split.gt_spatial[i, t].reshape(-1))
                wr.writerow([split.ids[i], t, int(split.gt_temporal[i, t]), int(gt[0]) if gt.size else -1,
                             int(np.argmax(flat))] + [repr(float(x)) for x in flat])
    with open(out / "temporal_weights.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["scene", "modality"] + [f"t{t}" for t in range(T)])
        for i in range(n):
            wr.writerow([split.ids[i], "audio"] + [repr(float(x)) for x in w_a[i]])
            wr.writerow([split.ids[i], "visual"] + [repr(float(x)) for x in w_v[i]])
    hit = train.spatial_hit_rate(params, mcfg, split, maps) if split.gt_temporal.any() else float("nan")
    print(f"spatial hit rate {hit:.4f} over active segments of {n} scenes")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "dump-attn": cmd_dump_attn}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        settings = resolve(args)
        return COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(f"tjstg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, TensorFormatError) as exc:
        print(f"tjstg {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ShapeError, NonDeterministicError, ValueError) as exc:
        print(f"tjstg {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
