"""Classification and segmentation metrics.

Classification uses micro-averaged accuracy, sensitivity and specificity over
per-class confusion counts. Segmentation uses Dice (DSC) and Jaccard (JI)
per foreground class.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if np.any(arr < 0):
                raise ValueError(f"{name} counts must be non-negative")
            setattr(self, name, arr)
        if not (self.tp.shape == self.tn.shape == self.fp.shape == self.fn.shape):
            raise ValueError("confusion count arrays must share one shape")

    @classmethod
    def zeros(cls, n_classes: int) -> "ConfusionCounts":
        z = np.zeros(n_classes, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())

    @property
    def totals(self) -> np.ndarray:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def _ratio(num, den) -> Optional[float]:
    # undefined metrics are reported as None rather than NaN
    return None if den == 0 else float(num) / float(den)


def classification_micro_metrics(counts: ConfusionCounts) -> Dict[str, Optional[float]]:
    tp, tn, fp, fn = (int(a.sum()) for a in (counts.tp, counts.tn, counts.fp, counts.fn))
    return {
        "micro_acc": _ratio(tp + tn, tp + fp + tn + fn),
        "micro_sen": _ratio(tp, tp + fn),
        "micro_spe": _ratio(tn, tn + fp),
    }


def confusion_from_predictions(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Binarise ``scores`` (N, C) at ``threshold`` and tally against binary ``labels``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = np.asarray(scores) >= threshold
    truth = np.asarray(labels).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"scores shape {pred.shape} != labels shape {truth.shape}")
    return ConfusionCounts(
        tp=(pred & truth).sum(axis=0),
        tn=(~pred & ~truth).sum(axis=0),
        fp=(pred & ~truth).sum(axis=0),
        fn=(~pred & truth).sum(axis=0),
    )


def overlap_counts(gt: np.ndarray, pr: np.ndarray, n_classes: int) -> np.ndarray:
    """Per foreground class c=1..n: rows of (|GT|, |PR|, |GT & PR|)."""
    gt, pr = np.asarray(gt), np.asarray(pr)
    if gt.shape != pr.shape:
        raise ValueError(f"GT shape {gt.shape} != PR shape {pr.shape}")
    out = np.zeros((n_classes, 3), dtype=np.int64)
    for c in range(1, n_classes + 1):
        g, p = gt == c, pr == c
        out[c - 1] = (g.sum(), p.sum(), (g & p).sum())
    return out


def _dsc_ji(counts: np.ndarray):
    g, p, inter = (counts[:, i].astype(np.float64) for i in range(3))
    union = g + p - inter
    empty = (g + p) == 0
    dsc = np.where(empty, 1.0, 2 * inter / np.where(empty, 1, g + p))
    ji = np.where(empty, 1.0, inter / np.where(empty, 1, union))
    return dsc, ji


def seg_overlap_metrics(gt: np.ndarray, pr: np.ndarray, n_classes: int) -> Dict[str, object]:
    """DSC and JI per foreground class plus their means.

    A class absent from both masks scores 1.0.
    """
    dsc, ji = _dsc_ji(overlap_counts(gt, pr, n_classes))
    return {"dsc": dsc, "ji": ji, "mean_dsc": float(dsc.mean()), "mean_ji": float(ji.mean())}


@dataclass
class SegmentationAccumulator:
    """Collects DSC/JI over a dataset.

    ``pooled`` sums pixel counts over all images before forming ratios;
    otherwise each image's scores are averaged.
    """

    n_classes: int
    pooled: bool = True
    counts: np.ndarray = field(init=False)
    per_image: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.counts = np.zeros((self.n_classes, 3), dtype=np.int64)

    def update(self, gt: np.ndarray, pr: np.ndarray) -> None:
        gt, pr = np.asarray(gt), np.asarray(pr)
        if gt.ndim == 2:
            gt, pr = gt[None], pr[None]
        for g, p in zip(gt, pr):
            c = overlap_counts(g, p, self.n_classes)
            self.counts += c
            self.per_image.append(_dsc_ji(c))

    def result(self) -> Dict[str, object]:
        if self.pooled or not self.per_image:
            dsc, ji = _dsc_ji(self.counts)
        else:
            dsc = np.mean([d for d, _ in self.per_image], axis=0)
            ji = np.mean([j for _, j in self.per_image], axis=0)
        return {"dsc": dsc, "ji": ji, "mean_dsc": float(np.mean(dsc)), "mean_ji": float(np.mean(ji))}


def build_report(
    cls_counts: ConfusionCounts, seg: Dict[str, object], extra: Optional[Dict[str, float]] = None
) -> Dict[str, Optional[float]]:
    report: Dict[str, Optional[float]] = dict(classification_micro_metrics(cls_counts))
    for i, (d, j) in enumerate(zip(seg["dsc"], seg["ji"]), start=1):
        report[f"dsc_class{i}"] = float(d)
        report[f"ji_class{i}"] = float(j)
    report["mean_dsc"] = float(seg["mean_dsc"])
    report["mean_ji"] = float(seg["mean_ji"])
    if extra:
        report.update({k: float(v) for k, v in extra.items()})
    return report


def format_report(report: Dict[str, Optional[float]]) -> str:
    """One ``name = value`` line per metric, values to 4 decimals."""
    lines = []
    for key, value in report.items():
        lines.append(f"{key} = {'undefined' if value is None else f'{value:.4f}'}")
    return "\n".join(lines)


def write_report(report: Dict[str, Optional[float]], path) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
