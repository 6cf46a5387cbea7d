"""Supervised training of the perception MLPs on clustered, labeled objects."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import ArgumentError, TrainingDivergedError
from ..neural import OptimizerState, batch_nll, mlp_backward, mlp_forward, optimizer_step, softmax
from .classes import N_CLASSES, SemanticClass
from .clustering import ClusteringConfig, cluster_objectness
from .model import DESK_OBJECT_SIZES, DESK_POINT_SIZES, PerceptionModel, init_perception_model

log = logging.getLogger(__name__)


@dataclass
class LabeledObject:
    points: np.ndarray  # (n, 3) sensor frame
    label: int
    scan_index: int


def majority_label(labels: np.ndarray, n_classes: int = N_CLASSES) -> int:
    """Most common label; ties go to Background, then to the lowest class id."""
    counts = np.bincount(labels[labels >= 0], minlength=n_classes)[:n_classes]
    best = counts.max()
    if counts[SemanticClass.BACKGROUND] == best:
        return int(SemanticClass.BACKGROUND)
    return int(np.argmax(counts))


def extract_objects(scans, clustering: ClusteringConfig = ClusteringConfig()) -> List[LabeledObject]:
    out = []
    for k, scan in enumerate(scans):
        if scan.labels is None:
            raise ArgumentError(f"scan {k} carries no point labels")
        for box in cluster_objectness(scan, clustering):
            out.append(LabeledObject(scan.points[box.members], majority_label(scan.labels[box.members]), k))
    return out


def rotate_yaw(points: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate about the sensor z axis."""
    if yaw == 0.0:
        return np.array(points, dtype=np.float64, copy=True)
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.array(points, dtype=np.float64, copy=True)
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


def normalize_object(points: np.ndarray) -> np.ndarray:
    lo, hi = points.min(axis=0), points.max(axis=0)
    anchor = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2]])
    return points - anchor


def predict_objects(model: PerceptionModel, objects: Sequence[LabeledObject], yaw: float = 0.0):
    """(object features (K,G), probs (K,C)) using every point of each object."""
    if not objects:
        return np.zeros((0, model.feature_dim)), np.zeros((0, model.n_classes))
    local = np.concatenate([normalize_object(rotate_yaw(o.points, yaw)) for o in objects])
    starts = np.cumsum([0] + [len(o.points) for o in objects[:-1]])
    feats = mlp_forward(model.point_mlp, local)
    pooled = np.maximum.reduceat(feats, starts, axis=0)
    out, cache = mlp_forward(model.object_mlp, pooled, return_cache=True)
    return cache.inputs[-1], softmax(out)


def object_accuracy(model: PerceptionModel, objects: Sequence[LabeledObject], yaw: float = 0.0) -> float:
    if not objects:
        raise ArgumentError("no objects to score")
    _, probs = predict_objects(model, objects, yaw)
    return float(np.mean(probs.argmax(axis=1) == np.array([o.label for o in objects])))


def yaw_robustness(model: PerceptionModel, objects: Sequence[LabeledObject],
                   yaws: Sequence[float] = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)) -> float:
    """Fraction of objects whose predicted class is the same at every yaw."""
    if not objects:
        raise ArgumentError("no objects to score")
    preds = np.stack([predict_objects(model, objects, y)[1].argmax(axis=1) for y in yaws])
    return float(np.mean((preds == preds[0]).all(axis=0)))


def compute_prototypes(model: PerceptionModel, objects: Sequence[LabeledObject]) -> np.ndarray:
    feats, _ = predict_objects(model, objects)
    labels = np.array([o.label for o in objects])
    protos = np.zeros((model.n_classes, model.feature_dim))
    for c in range(model.n_classes):
        if (labels == c).any():
            protos[c] = feats[labels == c].mean(axis=0)
    return protos


@dataclass
class PerceptionTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    points_per_object: int = 64
    lr: float = 0.005
    decay: float = 0.95
    optimizer: str = "adam"
    seed: int = 0
    yaw_augmentation: bool = True
    point_sizes: Tuple[int, ...] = DESK_POINT_SIZES
    object_sizes: Tuple[int, ...] = DESK_OBJECT_SIZES


@dataclass
class PerceptionTrainResult:
    model: PerceptionModel
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)


def _resample(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(len(points), size=m, replace=len(points) < m)
    return points[idx]


def train_perception(objects: Sequence[LabeledObject], config: PerceptionTrainConfig = PerceptionTrainConfig(),
                     model: PerceptionModel | None = None) -> PerceptionTrainResult:
    """Minimize mean object NLL with per-scan random yaw augmentation.

    Each object is resampled to a fixed point count per step so mini-batches
    stack into one array; max pooling makes duplicates harmless.
    """
    if not objects:
        raise ArgumentError("perception training needs at least one labeled object")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_perception_model(rng, config.point_sizes, config.object_sizes)
    opt = OptimizerState(base_lr=config.lr, decay=config.decay, kind=config.optimizer)
    labels = np.array([o.label for o in objects])
    n_scans = max(o.scan_index for o in objects) + 1
    M = config.points_per_object
    params = model.point_mlp.tensors() + model.object_mlp.tensors()
    result = PerceptionTrainResult(model)
    for epoch in range(config.epochs):
        yaws = rng.uniform(0, 2 * math.pi, size=n_scans) if config.yaw_augmentation else np.zeros(n_scans)
        order = rng.permutation(len(objects))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            B = len(batch)
            x = np.concatenate([
                _resample(normalize_object(rotate_yaw(objects[i].points, yaws[objects[i].scan_index])), M, rng)
                for i in batch])
            feats, pcache = mlp_forward(model.point_mlp, x, return_cache=True)
            F = feats.shape[1]
            feats = feats.reshape(B, M, F)
            arg = feats.argmax(axis=1)  # (B, F)
            pooled = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
            logits, ocache = mlp_forward(model.object_mlp, pooled, return_cache=True)
            loss, dlogits, _ = batch_nll(softmax(logits), labels[batch])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"perception loss is {loss} at epoch {epoch}, batch {start}")
            og, dpooled = mlp_backward(model.object_mlp, ocache, dlogits)
            dfeats = np.zeros((B, M, F))
            np.put_along_axis(dfeats, arg[:, None, :], dpooled[:, None, :], axis=1)
            pg, _ = mlp_backward(model.point_mlp, pcache, dfeats.reshape(B * M, F), need_input_grad=False)
            optimizer_step(opt, params, pg.tensors() + og.tensors())
            total += loss * B
            count += B
        result.losses.append(total / count)
        result.lrs.append(opt.lr)
        log.info("perception epoch %d loss %.4f lr %.5f", epoch + 1, total / count, opt.lr)
        opt.end_epoch()
    model.prototypes = compute_prototypes(model, objects)
    return result
