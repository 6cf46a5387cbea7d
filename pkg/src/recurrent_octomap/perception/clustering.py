"""Model-free objectness: range-adaptive single-linkage clustering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ..errors import ArgumentError


@dataclass
class ObjectnessBox:
    lo: np.ndarray  # (3,) min corner, sensor frame
    hi: np.ndarray  # (3,) max corner
    members: np.ndarray  # sorted point indices

    @property
    def n_points(self) -> int:
        return len(self.members)

    @classmethod
    def around(cls, points: np.ndarray, members: np.ndarray) -> "ObjectnessBox":
        members = np.asarray(members, dtype=np.int64)
        sel = points[members]
        return cls(sel.min(axis=0), sel.max(axis=0), members)

    def anchor(self) -> np.ndarray:
        """Box-local origin: center of the footprint at the bottom face."""
        return np.array([(self.lo[0] + self.hi[0]) / 2, (self.lo[1] + self.hi[1]) / 2, self.lo[2]])


@dataclass(frozen=True)
class ClusteringConfig:
    base_threshold: float = 0.3
    range_gain: float = 0.01
    min_points: int = 5
    ground_height: Optional[float] = None  # drop points at or below this map-frame z

    def __post_init__(self):
        if self.base_threshold <= 0 or self.range_gain < 0 or self.min_points < 1:
            raise ArgumentError("clustering thresholds must be positive")


def cluster_points(points: np.ndarray, config: ClusteringConfig = ClusteringConfig()) -> List[ObjectnessBox]:
    """Link i~j when |p_i - p_j| <= base + gain * max(r_i, r_j), r = range from the sensor.

    Boxes come back ordered by their smallest member index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return []
    r = np.linalg.norm(points, axis=1)
    reach = config.base_threshold + config.range_gain * float(r.max())
    pairs = cKDTree(points).query_pairs(reach, output_type="ndarray")
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        d = np.linalg.norm(points[i] - points[j], axis=1)
        ok = d <= config.base_threshold + config.range_gain * np.maximum(r[i], r[j])
        i, j = i[ok], j[ok]
    else:
        i = j = np.empty(0, dtype=np.int64)
    graph = coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    order = np.argsort(comp, kind="stable")
    bounds = np.flatnonzero(np.diff(comp[order])) + 1
    groups = [g for g in np.split(order, bounds) if len(g) >= config.min_points]
    groups.sort(key=lambda g: int(g[0]))
    return [ObjectnessBox.around(points, g) for g in groups]


def cluster_objectness(scan, config: ClusteringConfig = ClusteringConfig()) -> List[ObjectnessBox]:
    """Cluster a scan; indices refer to the scan's own point array."""
    points = scan.points
    if config.ground_height is None or len(points) == 0:
        return cluster_points(points, config)
    keep = np.flatnonzero(scan.pose.apply(points)[:, 2] > config.ground_height)
    boxes = cluster_points(points[keep], config)
    return [ObjectnessBox.around(points, keep[b.members]) for b in boxes]


def background_box(n_points: int, points: np.ndarray, boxes: List[ObjectnessBox]) -> Optional[ObjectnessBox]:
    """Virtual box over every point left out of the objectness boxes."""
    inside = np.zeros(n_points, dtype=bool)
    for b in boxes:
        inside[b.members] = True
    rest = np.flatnonzero(~inside)
    if len(rest) == 0:
        return None
    return ObjectnessBox.around(points, rest)
