"""Voxel-level confusion accumulation and the three segmentation scores."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import ArgumentError, UndefinedMetricError
from .perception.classes import N_CLASSES, SemanticClass
from .voxel_map import GroundTruthMap


@dataclass
class ConfusionMatrix:
    """counts[i, j]: voxels of true class i predicted as class j."""
    n_classes: int = N_CLASSES
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n_classes, self.n_classes), np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.n_classes, self.n_classes) or (self.counts < 0).any():
            raise ArgumentError("confusion counts must be a non-negative square matrix")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def scores(self) -> Dict[str, float]:
        return {"overall_accuracy": overall_accuracy(self), "mean_accuracy": mean_accuracy(self),
                "mean_iou": mean_iou(self)}


def accumulate(cm: ConfusionMatrix, pred_keys: np.ndarray, pred_probs: np.ndarray, gt: GroundTruthMap,
               resolution: Optional[float] = None) -> ConfusionMatrix:
    """Add one day's comparison to ``cm`` (returned as a new matrix).

    Ground-truth cells missing from the prediction count as Background;
    DontCare cells are skipped; predicted cells absent from the ground truth
    are ignored.
    """
    if resolution is not None and resolution != gt.resolution:
        raise ArgumentError(f"prediction resolution {resolution} != ground truth {gt.resolution}")
    pred_keys = np.asarray(pred_keys, dtype=np.int64).reshape(-1, 3)
    pred_probs = np.asarray(pred_probs, dtype=np.float64)
    if len(pred_probs) != len(pred_keys):
        raise ArgumentError("one probability row per predicted cell is required")
    lookup = {k: j for j, k in enumerate(map(tuple, pred_keys.tolist()))}
    care = gt.labels != SemanticClass.DONT_CARE
    gt_keys, gt_labels = gt.keys[care], gt.labels[care]
    idx = np.array([lookup.get(k, -1) for k in map(tuple, gt_keys.tolist())], dtype=np.int64)
    pred = np.full(len(gt_keys), int(SemanticClass.BACKGROUND), np.int64)
    seen = idx >= 0
    if seen.any():
        pred[seen] = pred_probs[idx[seen]].argmax(axis=1)
    counts = cm.counts.copy()
    np.add.at(counts, (gt_labels, pred), 1)
    return ConfusionMatrix(cm.n_classes, counts)


def _parts(cm: ConfusionMatrix):
    c = cm.counts
    total = int(c.sum())
    if total == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    diag = np.diag(c)
    supported = rows > 0
    return c, total, rows, cols, diag, supported


def overall_accuracy(cm: ConfusionMatrix) -> float:
    _, total, _, _, diag, _ = _parts(cm)
    return int(diag.sum()) / total


def mean_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall over classes that occur in the ground truth."""
    _, _, rows, _, diag, sup = _parts(cm)
    return float(np.mean([int(diag[i]) / int(rows[i]) for i in np.flatnonzero(sup)]))


def mean_iou(cm: ConfusionMatrix) -> float:
    _, _, rows, cols, diag, sup = _parts(cm)
    return float(np.mean([int(diag[i]) / int(rows[i] + cols[i] - diag[i]) for i in np.flatnonzero(sup)]))


METRIC_NAMES = ("overall_accuracy", "mean_accuracy", "mean_iou")


@dataclass
class MetricsRow:
    day: object  # int day index, or "mean"
    backend: str
    mntd: str
    cm: Optional[ConfusionMatrix] = None
    scores: Dict[str, float] = field(default_factory=dict)


def mean_row(rows: List[MetricsRow], backend: str, mntd: str) -> MetricsRow:
    """Unweighted mean of the per-day scores."""
    scores = {m: float(np.mean([r.scores[m] for r in rows])) for m in METRIC_NAMES}
    return MetricsRow("mean", backend, mntd, None, scores)


def write_metrics_csv(path, rows: Iterable[MetricsRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "backend", "mntd"] + list(METRIC_NAMES))
        for r in rows:
            w.writerow([r.day, r.backend, r.mntd] + ["%.6f" % r.scores[m] for m in METRIC_NAMES])


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_metrics_json(path, rows: Iterable[MetricsRow]):
    doc = []
    for r in rows:
        item = {"day": r.day, "backend": r.backend, "mntd": r.mntd, **r.scores}
        if r.cm is not None:
            item["confusion"] = r.cm.counts.tolist()
        doc.append(item)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
