"""Synthetic-shapes corpus: labeled scans of isolated primitive objects.

The same shape catalog furnishes the simulated parking lot, so a classifier
trained here transfers to the simulator without domain gap beyond layout.
"""
from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from ..geometry import Box, Cylinder, Pose, SensorModel, Shape, render_points
from .classes import SemanticClass
from .scan import PointCloudScan

SENSOR_HEIGHT = 2.0


def make_car(rng: np.random.Generator, x: float, y: float, yaw: float) -> Box:
    return Box(x, y, rng.uniform(3.8, 4.6), rng.uniform(1.7, 1.95), rng.uniform(1.4, 1.6), yaw)


def make_pedestrian(rng: np.random.Generator, x: float, y: float) -> Cylinder:
    return Cylinder(x, y, rng.uniform(0.2, 0.3), rng.uniform(1.55, 1.85))


def make_cyclist(rng: np.random.Generator, x: float, y: float, yaw: float) -> Box:
    return Box(x, y, rng.uniform(1.6, 1.9), rng.uniform(0.5, 0.7), rng.uniform(1.55, 1.8), yaw)


def make_background(rng: np.random.Generator, x: float, y: float, yaw: float) -> Box:
    kind = rng.integers(3)
    if kind == 0:  # wall panel
        return Box(x, y, rng.uniform(2.0, 20.0), 0.2, rng.uniform(1.5, 3.0), yaw)
    if kind == 1:  # post
        s = rng.uniform(0.25, 0.35)
        return Box(x, y, s, s, rng.uniform(3.0, 5.0), yaw)
    return Box(x, y, rng.uniform(0.8, 2.0), rng.uniform(0.8, 2.0), rng.uniform(0.5, 1.1), yaw)


def make_object(label: int, rng: np.random.Generator, x: float, y: float, yaw: float) -> Shape:
    if label == SemanticClass.CAR:
        return make_car(rng, x, y, yaw)
    if label == SemanticClass.PEDESTRIAN:
        return make_pedestrian(rng, x, y)
    if label == SemanticClass.CYCLIST:
        return make_cyclist(rng, x, y, yaw)
    return make_background(rng, x, y, yaw)


def footprint_radius(shape: Shape) -> float:
    if isinstance(shape, Cylinder):
        return shape.radius
    return 0.5 * math.hypot(shape.length, shape.width)


def random_layout(rng: np.random.Generator, n_objects: int, class_probs, max_range: float,
                  gap: float = 1.0, tries: int = 60) -> List[Tuple[Shape, int]]:
    placed: List[Tuple[Shape, int]] = []
    for _ in range(n_objects):
        label = int(rng.choice(len(class_probs), p=class_probs))
        for _ in range(tries):
            r = rng.uniform(3.0, max_range - 3.0)
            a = rng.uniform(0, 2 * math.pi)
            shape = make_object(label, rng, r * math.cos(a), r * math.sin(a), rng.uniform(0, 2 * math.pi))
            rad = footprint_radius(shape)
            if r - rad < 1.5:
                continue
            if all(math.hypot(shape.x - s.x, shape.y - s.y) > rad + footprint_radius(s) + gap
                   for s, _ in placed):
                placed.append((shape, label))
                break
    return placed


def make_shapes_corpus(n_scans: int, seed: int, objects_per_scan=(4, 8),
                       class_probs=(0.3, 0.25, 0.25, 0.2),
                       sensor: SensorModel = SensorModel(budget=6000)) -> List[PointCloudScan]:
    """Seeded list of labeled scans, each with a handful of well-separated objects."""
    rng = np.random.default_rng(seed)
    probs = np.asarray(class_probs, dtype=np.float64)
    probs = probs / probs.sum()
    pose = Pose.from_yaw(0.0, 0.0, SENSOR_HEIGHT, 0.0)
    scans = []
    for k in range(n_scans):
        layout = random_layout(rng, int(rng.integers(objects_per_scan[0], objects_per_scan[1] + 1)),
                               probs, sensor.max_range)
        pts, labels, _ = render_points(layout, pose, sensor, rng)
        scans.append(PointCloudScan(float(k), pose, pts, labels, frame=k))
    return scans
