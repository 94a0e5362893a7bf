"""Training loop, checkpoints, evaluation and prediction."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .backend import RngState, Tensor, no_grad
from .config import ModelConfig, TrainConfig
from .data import Sample, augment, load_dataset, preprocess, read_image, stack_batch, write_mask
from .heads import LossWeights, combined_loss, inverse_frequency_weights
from .metrics import (
    ConfusionCounts,
    SegmentationAccumulator,
    build_report,
    confusion_from_predictions,
)
from .model import ResFormerMTL
from .optim import AdamW

logger = logging.getLogger(__name__)

CKPT_BEST = "best.ckpt"
CKPT_LAST = "last.ckpt"
METRICS_LOG = "metrics.jsonl"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_state: Dict[str, np.ndarray]
    optimizer_state: Dict[str, np.ndarray]
    epoch: int
    best_val_loss: float
    config: dict
    class_weights: Optional[np.ndarray] = None

    def save(self, path) -> None:
        """Write a zip of .npy members with fixed timestamps (byte-reproducible)."""
        meta = {
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "config": self.config,
        }
        arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
        arrays.update({f"model/{k}": v for k, v in self.model_state.items()})
        arrays.update({f"optim/{k}": v for k, v in self.optimizer_state.items()})
        if self.class_weights is not None:
            arrays["class_weights"] = np.asarray(self.class_weights)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        model_state, optim_state, class_weights, meta = {}, {}, None, None
        with zipfile.ZipFile(path) as zf:
            for name in zf.namelist():
                try:
                    arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                except ValueError as exc:
                    raise TrainingError(f"{path}: unreadable entry {name}: {exc}") from exc
                key = name[: -len(".npy")]
                if key == "meta":
                    meta = json.loads(arr.tobytes().decode())
                elif key.startswith("model/"):
                    model_state[key[len("model/"):]] = arr
                elif key.startswith("optim/"):
                    optim_state[key[len("optim/"):]] = arr
                elif key == "class_weights":
                    class_weights = arr
        if meta is None:
            raise TrainingError(f"{path}: not a checkpoint (no metadata)")
        missing = {"epoch", "best_val_loss", "config"} - set(meta)
        if missing:
            raise TrainingError(f"{path}: metadata lacks {sorted(missing)}")
        return cls(model_state, optim_state, meta["epoch"], meta["best_val_loss"], meta["config"], class_weights)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def build_model(self) -> ResFormerMTL:
        model = ResFormerMTL(self.train_config().model)
        model.load_state_dict(self.model_state)
        return model.eval()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Predictions:
    cls_probs: np.ndarray  # (N, n)
    seg_probs: np.ndarray  # (N, n+1, H, W)

    @property
    def masks(self) -> np.ndarray:
        return self.seg_probs.argmax(axis=1)


def predict_samples(model: ResFormerMTL, samples: Sequence[Sample], batch_size: int = 8) -> Predictions:
    """Eval-mode forward over ``samples``; returns class and pixel probabilities."""
    model.eval()
    cls_out, seg_out = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            images, _, _ = stack_batch(samples[start:start + batch_size])
            out = model(Tensor(images))
            cls_out.append(expit(out.cls_logits.data))
            seg_out.append(out.seg_probs.data)
    return Predictions(np.concatenate(cls_out), np.concatenate(seg_out))


def batch_loss(model, samples, weights: LossWeights, batch_size: int = 8) -> float:
    model.eval()
    total = 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            images, masks, labels = stack_batch(batch)
            loss, _, _ = combined_loss(model(Tensor(images)), labels, masks, weights)
            total += loss.item() * len(batch)
    return total / len(samples)


def metrics_report(
    predictions: Predictions,
    samples: Sequence[Sample],
    n_classes: int,
    threshold: float = 0.5,
    pooled: bool = True,
) -> Dict[str, Optional[float]]:
    _, masks, labels = stack_batch(samples)
    counts = confusion_from_predictions(predictions.cls_probs, labels, threshold)
    seg = SegmentationAccumulator(n_classes, pooled=pooled)
    seg.update(masks, predictions.masks)
    return build_report(counts, seg.result())


def evaluate(
    model: ResFormerMTL,
    samples: Sequence[Sample],
    weights: Optional[LossWeights] = None,
    batch_size: int = 8,
    threshold: float = 0.5,
    pooled: bool = True,
) -> Dict[str, Optional[float]]:
    """Eval-mode metrics report (and combined loss when ``weights`` is given)."""
    if not samples:
        raise TrainingError("cannot evaluate on an empty split")
    preds = predict_samples(model, samples, batch_size)
    report = metrics_report(preds, samples, model.cfg.n_classes, threshold, pooled)
    if weights is not None:
        report["loss"] = batch_loss(model, samples, weights, batch_size)
    return report


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ResFormerMTL
    optimizer: AdamW
    history: List[dict] = field(default_factory=list)
    best: Optional[Checkpoint] = None
    last: Optional[Checkpoint] = None


def _prepare(samples: Sequence[Sample], size) -> List[Sample]:
    return [preprocess(s, size) for s in samples]


def train(
    cfg: TrainConfig,
    train_samples: Optional[Sequence[Sample]] = None,
    val_samples: Optional[Sequence[Sample]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    write_files: bool = True,
) -> TrainResult:
    """Mini-batch AdamW training on the combined loss.

    Validation loss is computed after every epoch (no gradient updates) and
    the lowest-loss state is kept as the best checkpoint. When ``val_samples``
    is absent the training split doubles as the validation split.
    """
    if train_samples is None:
        if not cfg.train_data:
            raise TrainingError("no training data given")
        train_samples = load_dataset(cfg.train_data)
    if val_samples is None and cfg.val_data:
        val_samples = load_dataset(cfg.val_data)
    size = cfg.model.input_size
    train_samples = _prepare(train_samples, size)
    val_samples = _prepare(val_samples, size) if val_samples else train_samples
    if not train_samples:
        raise TrainingError("training split is empty")

    rng_state = RngState(cfg.seed)
    model = ResFormerMTL(cfg.model, rng=rng_state.spawn(0))
    optimizer = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    labels = np.stack([s.labels for s in train_samples])
    weights = LossWeights(cfg.lambda_cls, cfg.lambda_seg, inverse_frequency_weights(labels))
    shuffle_rng = rng_state.spawn(1)

    out_dir = Path(cfg.checkpoint_dir) if write_files else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")
        (out_dir / METRICS_LOG).write_text("")

    result = TrainResult(model, optimizer)
    best_loss = math.inf
    n = len(train_samples)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            if cfg.augment:
                batch = [
                    augment(s, np.random.Generator(np.random.PCG64(
                        np.random.SeedSequence(cfg.seed, spawn_key=(2, epoch, int(i))))))
                    for s, i in zip(batch, idx)
                ]
            images, masks, y = stack_batch(batch)
            optimizer.zero_grad()
            loss, _, _ = combined_loss(model(Tensor(images)), y, masks, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss {value} at epoch {epoch}")
            loss.backward()
            optimizer.step()
            running += value * len(batch)

        val_report = evaluate(model, val_samples, weights, cfg.batch_size)
        record = {
            "epoch": epoch,
            "train_loss": running / n,
            "val_loss": val_report["loss"],
            "micro_acc": val_report["micro_acc"],
            "mean_dsc": val_report["mean_dsc"],
        }
        result.history.append(record)
        logger.info(
            "epoch %d train_loss %.6f val_loss %.6f micro_acc %s mean_dsc %.4f",
            epoch, record["train_loss"], record["val_loss"],
            "undefined" if record["micro_acc"] is None else f"{record['micro_acc']:.4f}",
            record["mean_dsc"],
        )
        if on_epoch is not None:
            on_epoch(record)
        snapshot = Checkpoint(
            model.state_dict(), optimizer.state_dict(), epoch,
            min(best_loss, record["val_loss"]), cfg.to_dict(), weights.class_weights,
        )
        result.last = snapshot
        if record["val_loss"] < best_loss:
            best_loss = record["val_loss"]
            result.best = snapshot
            if out_dir is not None:
                snapshot.save(out_dir / CKPT_BEST)
        if out_dir is not None:
            with open(out_dir / METRICS_LOG, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    if out_dir is not None and result.last is not None:
        result.last.save(out_dir / CKPT_LAST)
    return result


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def predict_image(model: ResFormerMTL, image_path, out_dir, dump_probs: bool = False) -> Dict[str, object]:
    """Segment and classify one image file.

    Writes ``<stem>_mask.png`` (argmax label map, dataset mask format) and
    ``<stem>_probs.csv`` (per-class probabilities); with ``dump_probs`` the
    per-pixel probabilities go to ``<stem>_seg_probs.npy``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = read_image(image_path)
    n = model.cfg.n_classes
    sample = preprocess(Sample(image, np.zeros(image.shape[1:], dtype=np.int64), np.zeros(n, dtype=np.int64)),
                        model.cfg.input_size)
    preds = predict_samples(model, [sample], 1)
    stem = Path(image_path).stem
    mask = preds.masks[0]
    paths = {"mask": out_dir / f"{stem}_mask.png", "probs": out_dir / f"{stem}_probs.csv"}
    write_mask(mask, paths["mask"])
    with open(paths["probs"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename"] + [f"class_{c + 1}" for c in range(n)])
        writer.writerow([Path(image_path).name] + [f"{p:.6f}" for p in preds.cls_probs[0]])
    if dump_probs:
        paths["seg_probs"] = out_dir / f"{stem}_seg_probs.npy"
        np.save(paths["seg_probs"], preds.seg_probs[0])
    return {"mask": mask, "cls_probs": preds.cls_probs[0], "seg_probs": preds.seg_probs[0], "paths": paths}
