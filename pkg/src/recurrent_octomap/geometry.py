"""Rigid poses, primitive shapes and the lidar-style surface sampler shared by
the simulator and the synthetic-shapes corpus."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import ArgumentError

ORTHONORMAL_TOL = 1e-9


@dataclass
class Pose:
    """Sensor-to-map transform: ``p_map = rotation @ p_sensor + translation``."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, q: Sequence[float], translation: Sequence[float]) -> "Pose":
        w, x, y, z = (float(v) for v in q)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if n == 0.0 or not math.isfinite(n):
            raise ArgumentError("quaternion must be finite and non-zero")
        w, x, y, z = w / n, x / n, y / n, z / n
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return cls(r, translation)

    @classmethod
    def from_yaw(cls, x: float, y: float, z: float, yaw: float) -> "Pose":
        return cls.from_quaternion((math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)), (x, y, z))

    def quaternion(self) -> Tuple[float, float, float, float]:
        m = self.rotation
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return tuple(float(v) for v in q)

    def orthonormality_error(self) -> float:
        return float(np.abs(self.rotation @ self.rotation.T - np.eye(3)).max())

    def validate(self):
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise ArgumentError("pose contains non-finite values")
        err = self.orthonormality_error()
        if err > ORTHONORMAL_TOL or np.linalg.det(self.rotation) < 0:
            raise ArgumentError(f"pose rotation is not orthonormal (error {err:.3g})")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Sensor frame -> map frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map frame -> sensor frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


@dataclass(frozen=True)
class Box:
    """Upright box standing on z0; ``length`` runs along the yawed local x axis."""
    x: float
    y: float
    length: float
    width: float
    height: float
    yaw: float = 0.0
    z0: float = 0.0

    def faces(self):
        """(center, normal, half_u, half_v, area) for the five faces above ground."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        ax = np.array([c, s, 0.0])
        ay = np.array([-s, c, 0.0])
        az = np.array([0.0, 0.0, 1.0])
        hl, hw, hh = self.length / 2, self.width / 2, self.height / 2
        mid = np.array([self.x, self.y, self.z0 + hh])
        out = []
        for sign in (1.0, -1.0):
            out.append((mid + sign * hl * ax, sign * ax, hw * ay, hh * az, self.width * self.height))
            out.append((mid + sign * hw * ay, sign * ay, hl * ax, hh * az, self.length * self.height))
        out.append((mid + hh * az, az, hl * ax, hw * ay, self.length * self.width))
        return out

    def distance(self, p: np.ndarray) -> float:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = p[0] - self.x, p[1] - self.y
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        ex = max(abs(lx) - self.length / 2, 0.0)
        ey = max(abs(ly) - self.width / 2, 0.0)
        ez = max(self.z0 - p[2], p[2] - (self.z0 + self.height), 0.0)
        return math.sqrt(ex * ex + ey * ey + ez * ez)

    def moved(self, x: float, y: float, yaw: float | None = None) -> "Box":
        return Box(x, y, self.length, self.width, self.height,
                   self.yaw if yaw is None else yaw, self.z0)


@dataclass(frozen=True)
class Cylinder:
    x: float
    y: float
    radius: float
    height: float
    z0: float = 0.0

    def distance(self, p: np.ndarray) -> float:
        er = max(math.hypot(p[0] - self.x, p[1] - self.y) - self.radius, 0.0)
        ez = max(self.z0 - p[2], p[2] - (self.z0 + self.height), 0.0)
        return math.sqrt(er * er + ez * ez)

    def moved(self, x: float, y: float, yaw: float | None = None) -> "Cylinder":
        return Cylinder(x, y, self.radius, self.height, self.z0)


Shape = Union[Box, Cylinder]


def visible_area(shape: Shape, viewpoint: np.ndarray) -> float:
    if isinstance(shape, Box):
        return sum(f[4] for f in shape.faces() if np.dot(f[1], viewpoint - f[0]) > 0)
    area = math.pi * shape.radius * shape.height
    if viewpoint[2] > shape.z0 + shape.height:
        area += math.pi * shape.radius ** 2
    return area


def sample_surface(shape: Shape, n: int, rng: np.random.Generator,
                   viewpoint: np.ndarray | None = None) -> np.ndarray:
    """``n`` points uniformly (by area) on the faces visible from ``viewpoint``.

    Without a viewpoint every face above ground is eligible.
    """
    if n <= 0:
        return np.empty((0, 3))
    if isinstance(shape, Box):
        faces = shape.faces()
        if viewpoint is not None:
            faces = [f for f in faces if np.dot(f[1], viewpoint - f[0]) > 0]
        if not faces:
            return np.empty((0, 3))
        areas = np.array([f[4] for f in faces])
        which = rng.choice(len(faces), size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        centers = np.array([f[0] for f in faces])[which]
        hu = np.array([f[2] for f in faces])[which]
        hv = np.array([f[3] for f in faces])[which]
        return centers + uv[:, :1] * hu + uv[:, 1:] * hv
    # cylinder: lateral half facing the viewpoint, plus the top cap when seen from above
    r, h = shape.radius, shape.height
    if viewpoint is None:
        lateral, top = 2 * math.pi * r * h, math.pi * r * r
        phi0, span = 0.0, math.pi
    else:
        lateral = math.pi * r * h
        top = math.pi * r * r if viewpoint[2] > shape.z0 + h else 0.0
        phi0, span = math.atan2(viewpoint[1] - shape.y, viewpoint[0] - shape.x), math.pi / 2
    on_top = rng.uniform(size=n) < top / (lateral + top)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    pts = np.empty((n, 3))
    phi = phi0 + (2 * u - 1) * span
    pts[:, 0] = shape.x + r * np.cos(phi)
    pts[:, 1] = shape.y + r * np.sin(phi)
    pts[:, 2] = shape.z0 + v * h
    if on_top.any():
        rad = r * np.sqrt(u[on_top])
        ang = 2 * math.pi * v[on_top]
        pts[on_top, 0] = shape.x + rad * np.cos(ang)
        pts[on_top, 1] = shape.y + rad * np.sin(ang)
        pts[on_top, 2] = shape.z0 + h
    return pts


@dataclass(frozen=True)
class SensorModel:
    """Point-density model of a spinning lidar (no occlusion ray casting)."""
    max_range: float = 25.0
    density_at_10m: float = 40.0  # points per m^2 of visible surface at 10 m
    min_points: int = 20
    max_points_per_object: int = 400
    noise_sigma: float = 0.02
    budget: int = 2000

    def points_for(self, area: float, distance: float) -> int:
        n = int(round(area * self.density_at_10m * 10.0 / max(distance, 2.0)))
        return int(min(max(n, self.min_points), self.max_points_per_object))


def render_points(objects: Sequence[Tuple[Shape, int]], pose: Pose, sensor: SensorModel,
                  rng: np.random.Generator):
    """Sample a 360-degree scan of ``objects`` seen from ``pose``.

    Returns ``(points_sensor (N,3), labels (N,), object_index (N,))``.
    Random draws happen in object order so the result is a pure function of
    the generator state.
    """
    origin = pose.translation
    chunks, labels, owners = [], [], []
    for j, (shape, label) in enumerate(objects):
        dist = shape.distance(origin)
        if dist > sensor.max_range:
            continue
        area = visible_area(shape, origin)
        if area <= 0:
            continue
        pts = sample_surface(shape, sensor.points_for(area, dist), rng, origin)
        if sensor.noise_sigma > 0:
            pts = pts + rng.normal(0.0, sensor.noise_sigma, size=pts.shape)
        pts = pts[np.linalg.norm(pts - origin, axis=1) <= sensor.max_range]
        if len(pts):
            chunks.append(pts)
            labels.append(np.full(len(pts), label, dtype=np.int64))
            owners.append(np.full(len(pts), j, dtype=np.int64))
    if not chunks:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    pts = np.concatenate(chunks)
    lab = np.concatenate(labels)
    own = np.concatenate(owners)
    if len(pts) > sensor.budget:
        keep = np.sort(rng.choice(len(pts), size=sensor.budget, replace=False))
        pts, lab, own = pts[keep], lab[keep], own[keep]
    return pose.apply_inverse(pts), lab, own
