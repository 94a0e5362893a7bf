"""Command-line interface: ``synth``, ``train``, ``evaluate`` and ``predict``.

Every TrainConfig field has a flag of the same name (``--lr``, ``--batch_size``);
model fields are reached as ``--model.<field>`` (``--model.variant sequential``,
``--model.use_dfe false``). Values are resolved as defaults < ``--config`` file <
flags. Failures exit nonzero with one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import DatasetError, load_dataset, preprocess, synth_generate, write_dataset
from .heads import LossWeights
from .metrics import format_report, write_report
from .training import (
    CKPT_BEST,
    CKPT_LAST,
    METRICS_LOG,
    Checkpoint,
    TrainingError,
    batch_loss,
    metrics_report,
    predict_image,
    predict_samples,
    train,
)

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, details: Optional[List[str]] = None, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.details = details or []
        self.code = code


# ---------------------------------------------------------------------------
# value parsing
# ---------------------------------------------------------------------------

def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _list_of(conv: Callable) -> Callable[[str], list]:
    def parse(text: str) -> list:
        try:
            return [conv(v) for v in text.replace(" ", "").split(",") if v]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _parser_for(default) -> Callable[[str], object]:
    if isinstance(default, bool):
        return parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, (list, tuple)):
        elem = default[0] if default else 0
        return _list_of(float if isinstance(elem, float) else int)
    return str


_MODEL_OPTIONAL = {"shift_size": int, "decoder_channels": _list_of(int)}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training configuration (TrainConfig fields)")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name == "model":
            continue
        value = getattr(defaults, f.name)
        group.add_argument(
            f"--{f.name}", type=_parser_for(value), default=argparse.SUPPRESS,
            metavar=type(value).__name__.upper(), help=f"default: {value}",
        )
    mgroup = parser.add_argument_group("model configuration (ModelConfig fields)")
    mdef = ModelConfig()
    for f in dataclasses.fields(ModelConfig):
        value = getattr(mdef, f.name)
        conv = _MODEL_OPTIONAL.get(f.name) or _parser_for(value)
        mgroup.add_argument(
            f"--model.{f.name}", dest=f"model.{f.name}", type=conv, default=argparse.SUPPRESS,
            help=f"default: {value}",
        )
    parser.add_argument("--tiny", action="store_true", help="start from the desk-scale model preset")


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Merge defaults, an optional JSON config file and explicit flags."""
    base = TrainConfig(model=ModelConfig.tiny()) if getattr(args, "tiny", False) else TrainConfig()
    doc = base.to_dict()
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot read config file {args.config}: {exc}", code=EXIT_USAGE) from exc
        model_part = loaded.pop("model", {}) or {}
        unknown = sorted(set(loaded) - set(doc)) + sorted(f"model.{k}" for k in set(model_part) - set(doc["model"]))
        if unknown:
            raise CliError("config", "unknown config keys", unknown, code=EXIT_USAGE)
        doc.update(loaded)
        doc["model"].update(model_part)
    for key, value in vars(args).items():
        if key.startswith("model."):
            doc["model"][key[len("model."):]] = value
        elif key in doc and key != "model":
            doc[key] = value
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc), code=EXIT_USAGE) from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> Dict[str, object]:
    rng = np.random.default_rng(args.seed)
    splits = {"train": args.count, "val": args.val_count, "test": args.test_count}
    out = Path(args.out)
    written = {}
    for split, count in splits.items():
        if count <= 0:
            continue
        samples = synth_generate(rng, count, args.size, args.n_classes)
        write_dataset(samples, out / split, split=split, n_classes=args.n_classes)
        written[split] = count
        print(f"wrote {count} samples to {out / split}")
    return written


def cmd_train(args) -> None:
    cfg = resolve_config(args)
    if not cfg.train_data:
        raise CliError("config", "train_data is required (flag --train_data or config file)", code=EXIT_USAGE)
    result = train(cfg)
    out = Path(cfg.checkpoint_dir)
    best = result.best
    print(f"best epoch {best.epoch} val_loss {best.best_val_loss:.6f}")
    print(f"checkpoints: {out / CKPT_BEST} {out / CKPT_LAST}")
    print(f"metrics log: {out / METRICS_LOG}")


def _load_checkpoint(path):
    try:
        return Checkpoint.load(path)
    except FileNotFoundError as exc:
        raise CliError("checkpoint", f"checkpoint not found: {path}") from exc
    except (TrainingError, OSError, ValueError, KeyError) as exc:
        raise CliError("checkpoint", f"cannot read checkpoint {path}: {exc}") from exc


def cmd_evaluate(args) -> Dict[str, Optional[float]]:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    cfg = ckpt.train_config()
    samples = [preprocess(s, cfg.model.input_size) for s in load_dataset(args.data)]
    if not samples:
        raise CliError("data", f"split {args.data} is empty")
    preds = predict_samples(model, samples, cfg.batch_size)
    report = metrics_report(preds, samples, cfg.model.n_classes, args.threshold, pooled=not args.per_image)
    weights = LossWeights(cfg.lambda_cls, cfg.lambda_seg, ckpt.class_weights)
    report["loss"] = batch_loss(model, samples, weights, cfg.batch_size)
    print(format_report(report))
    if args.report:
        write_report(report, args.report)
    if args.dump_predictions:
        np.savez(
            args.dump_predictions,
            cls_probs=preds.cls_probs,
            seg_probs=preds.seg_probs,
            masks=np.stack([s.mask for s in samples]),
            labels=np.stack([s.labels for s in samples]),
        )
    return report


def cmd_predict(args) -> None:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    for image in args.image:
        result = predict_image(model, image, args.out, dump_probs=args.dump_probs)
        probs = " ".join(f"{p:.4f}" for p in result["cls_probs"])
        print(f"{image}: mask {result['paths']['mask']} class probabilities {probs}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resformer-mtl",
        description="Multi-task ResFormer: joint lesion segmentation and classification.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic lesion dataset (train/val/test splits)")
    p.add_argument("--out", required=True, help="output directory; splits go to <out>/<split>")
    p.add_argument("--count", type=int, default=16, help="training samples (default 16)")
    p.add_argument("--val_count", type=int, default=0, help="validation samples (default 0)")
    p.add_argument("--test_count", type=int, default=0, help="test samples (default 0)")
    p.add_argument("--size", type=int, default=32, help="square image size in pixels (default 32)")
    p.add_argument("--n_classes", type=int, default=2, help="lesion classes, 1..3 (default 2)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes checkpoints and a metrics log")
    p.add_argument("--config", help="JSON file with TrainConfig fields (model fields under \"model\")")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics report for a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="split directory or manifest.json")
    p.add_argument("--threshold", type=float, default=0.5, help="classification threshold (default 0.5)")
    p.add_argument("--per_image", action="store_true", help="average DSC/JI per image instead of pooling")
    p.add_argument("--report", help="also write the report as JSON to this path")
    p.add_argument("--dump_predictions", help="save probabilities and ground truth to this .npz")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment and classify image files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+", help="one or more image files")
    p.add_argument("--out", default="predictions", help="output directory (default ./predictions)")
    p.add_argument("--dump_probs", action="store_true", help="also save per-pixel probabilities (.npy)")
    p.set_defaults(func=cmd_predict)
    return parser


def _fail(kind: str, message: str, details: Optional[List[str]] = None) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "details": details or []}) + "\n")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        stream=sys.stdout,
        force=True,
    )
    try:
        args.func(args)
    except CliError as exc:
        _fail(exc.kind, str(exc), exc.details)
        return exc.code
    except DatasetError as exc:
        _fail("data", "dataset validation failed", exc.problems)
        return EXIT_FAILURE
    except TrainingError as exc:
        _fail("training", str(exc))
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        _fail(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
