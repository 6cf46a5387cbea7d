"""Point MLP, objectness max-pooling, object MLP and feature propagation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from ..errors import ArgumentError, ConfigurationError
from ..neural import MLPParams, init_mlp, mlp_forward, mlp_hidden, softmax
from ..neural.io import mlps_from_bundle, mlps_to_bundle, read_bundle, write_bundle
from .classes import N_CLASSES
from .clustering import ClusteringConfig, ObjectnessBox, background_box, cluster_objectness

DESK_POINT_SIZES = (32, 32, 64)
DESK_OBJECT_SIZES = (64, 32)
FULL_POINT_SIZES = (64, 64, 64, 128, 1024)
FULL_OBJECT_SIZES = (512, 256)


@dataclass
class PerceptionModel:
    point_mlp: MLPParams  # 3 -> ... -> F, relu throughout
    object_mlp: MLPParams  # F -> ... -> G -> n_classes logits
    prototypes: Optional[np.ndarray] = None  # (n_classes, G) class-mean object features

    def __post_init__(self):
        if self.point_mlp.in_dim != 3:
            raise ConfigurationError(f"point MLP must take xyz input, got {self.point_mlp.in_dim}")
        if self.object_mlp.in_dim != self.point_mlp.out_dim:
            raise ConfigurationError("object MLP input must match point feature size")
        if self.prototypes is not None and self.prototypes.shape != (self.n_classes, self.feature_dim):
            raise ConfigurationError(f"prototype table has shape {self.prototypes.shape}")

    @property
    def feature_dim(self) -> int:
        """Size of the object feature propagated to points (penultimate object-MLP layer)."""
        return self.object_mlp.layers[-1].in_dim

    @property
    def n_classes(self) -> int:
        return self.object_mlp.out_dim

    def copy(self) -> "PerceptionModel":
        return PerceptionModel(self.point_mlp.copy(), self.object_mlp.copy(),
                               None if self.prototypes is None else self.prototypes.copy())


def init_perception_model(rng: np.random.Generator, point_sizes: Sequence[int] = DESK_POINT_SIZES,
                          object_sizes: Sequence[int] = DESK_OBJECT_SIZES,
                          n_classes: int = N_CLASSES) -> PerceptionModel:
    point = init_mlp([3, *point_sizes], rng, final_activation="relu")
    obj = init_mlp([point_sizes[-1], *object_sizes, n_classes], rng, final_activation="identity")
    return PerceptionModel(point, obj)


@dataclass
class PointFeatureSet:
    point_features: np.ndarray  # (N, F)
    object_features: Optional[np.ndarray] = None  # (N, G) propagated object feature
    point_probs: Optional[np.ndarray] = None  # (N, C) propagated class probabilities


def local_coordinates(points: np.ndarray, boxes: Sequence[ObjectnessBox],
                      background: Optional[ObjectnessBox] = None) -> np.ndarray:
    """Express each point relative to the anchor of the box that owns it."""
    out = np.array(points, dtype=np.float64, copy=True)
    for b in list(boxes) + ([background] if background is not None else []):
        out[b.members] = points[b.members] - b.anchor()
    return out


def extract_point_features(params: MLPParams, points: np.ndarray,
                           boxes: Optional[Sequence[ObjectnessBox]] = None,
                           background: Optional[ObjectnessBox] = None) -> PointFeatureSet:
    """Row-wise point MLP. With boxes, coordinates are box-local first."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if params.in_dim != 3:
        raise ConfigurationError(f"point MLP expects {params.in_dim} inputs, points have 3")
    if boxes is not None:
        points = local_coordinates(points, boxes, background)
    if len(points) == 0:
        return PointFeatureSet(np.zeros((0, params.out_dim)))
    return PointFeatureSet(mlp_forward(params, points))


def classify_object(params_o: MLPParams, features: PointFeatureSet, box: ObjectnessBox):
    """Max-pool member features, run the object MLP; returns (object_feature, probs)."""
    if box.n_points == 0:
        raise ArgumentError("cannot classify an empty objectness box")
    pooled = features.point_features[box.members].max(axis=0)
    hidden, logits = mlp_hidden(params_o, pooled[None, :])
    return hidden[0], softmax(logits[0])


def propagate_to_points(object_feature: np.ndarray, box: ObjectnessBox, feature_set: PointFeatureSet,
                        probs: Optional[np.ndarray] = None) -> PointFeatureSet:
    n = len(feature_set.point_features)
    obj = feature_set.object_features
    if obj is None:
        obj = np.zeros((n, len(object_feature)))
    else:
        obj = obj.copy()
    obj[box.members] = object_feature
    pp = feature_set.point_probs
    if probs is not None:
        pp = np.zeros((n, len(probs))) if pp is None else pp.copy()
        pp[box.members] = probs
    return replace(feature_set, object_features=obj, point_probs=pp)


@dataclass
class ScanPerception:
    boxes: List[ObjectnessBox]
    background: Optional[ObjectnessBox]
    object_features: np.ndarray  # (len(boxes) [+1 background], G)
    object_probs: np.ndarray  # same rows, (.., C)
    point_features: np.ndarray  # (N, G) propagated
    point_probs: np.ndarray  # (N, C) propagated

    def all_boxes(self) -> List[ObjectnessBox]:
        return self.boxes + ([self.background] if self.background is not None else [])


def perceive(model: PerceptionModel, scan, clustering: ClusteringConfig = ClusteringConfig()) -> ScanPerception:
    """Full single-scan pipeline: cluster, point MLP, pool, object MLP, propagate."""
    points = scan.points
    n = len(points)
    boxes = cluster_objectness(scan, clustering)
    bg = background_box(n, points, boxes)
    every = boxes + ([bg] if bg is not None else [])
    G, C = model.feature_dim, model.n_classes
    if n == 0:
        return ScanPerception(boxes, bg, np.zeros((0, G)), np.zeros((0, C)), np.zeros((0, G)),
                              np.zeros((0, C)))
    feats = extract_point_features(model.point_mlp, points, boxes, bg).point_features
    owner = np.full(n, -1, dtype=np.int64)
    for k, b in enumerate(every):
        owner[b.members] = k
    pooled = np.stack([feats[b.members].max(axis=0) for b in every])
    hidden, logits = mlp_hidden(model.object_mlp, pooled)
    probs = softmax(logits)
    valid = owner >= 0
    pf = np.zeros((n, G))
    pp = np.full((n, C), 1.0 / C)
    pf[valid] = hidden[owner[valid]]
    pp[valid] = probs[owner[valid]]
    return ScanPerception(boxes, bg, hidden, probs, pf, pp)


def save_perception(path, model: PerceptionModel, meta: dict | None = None):
    extra = {} if model.prototypes is None else {"prototypes": model.prototypes}
    write_bundle(path, mlps_to_bundle({"point": model.point_mlp, "object": model.object_mlp},
                                      model.n_classes, extra, meta))


def load_perception(path) -> PerceptionModel:
    mlps, extra = mlps_from_bundle(read_bundle(path))
    if "point" not in mlps or "object" not in mlps:
        raise ConfigurationError(f"{path} does not hold a perception model")
    return PerceptionModel(mlps["point"], mlps["object"], extra.get("prototypes"))
