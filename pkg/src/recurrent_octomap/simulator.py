"""Deterministic multi-day parking-lot world, lidar rendering, per-day voxel
ground truth and classifier-noise injection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, ConfigurationError, DataPathError
from .geometry import Box, Pose, SensorModel, Shape, render_points
from .perception.classes import N_CLASSES, SemanticClass
from .perception.corpus import make_car, make_cyclist, make_pedestrian
from .perception.scan import PointCloudScan
from .voxel_map import GroundTruthMap, cell_keys

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400

# Rows: true class, columns: reported class. Parked cars are under-detected
# (reported as background half the time) and cyclists mostly look like
# pedestrians, so a per-frame vote is systematically wrong for both.
DEFAULT_CONFUSION = (
    (0.85, 0.07, 0.05, 0.03),
    (0.50, 0.42, 0.04, 0.04),
    (0.08, 0.02, 0.75, 0.15),
    (0.08, 0.05, 0.50, 0.37),
)


@dataclass
class ScenarioConfig:
    seed: int = 7
    days: int = 14
    train_days: int = 7
    frames_per_day: int = 600
    frame_rate: float = 10.0
    extent: Tuple[float, float] = (60.0, 40.0)
    max_range: float = 25.0
    sensor_height: float = 2.0
    slots_per_row: int = 20
    car_initial: float = 0.6
    car_stay: float = 0.85
    car_arrive: float = 0.35
    car_schedule: Optional[List[List[int]]] = None  # [day][slot] presence, overrides the Markov chain
    pedestrian_rate: float = 0.12  # spawns per second
    pedestrian_speed: float = 1.3  # m/s
    cyclist_rate: float = 0.06
    cyclist_speed: float = 4.0
    point_density: float = 40.0  # points per m^2 at 10 m
    min_points: int = 20
    max_points_per_object: int = 400
    point_budget: int = 2000
    noise_sigma: float = 0.02
    dropout: float = 0.3  # per cell-frame observation drop probability
    confusion: List[List[float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_CONFUSION])
    feature_jitter: float = 0.1  # relative to the prototype RMS
    observation_mode: str = "noise"  # "noise" | "perception"

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        self.validate()

    def validate(self):
        def bad(name, why):
            raise ConfigurationError(f"scenario field {name!r}: {why}")

        for name in ("days", "frames_per_day", "slots_per_row", "min_points", "max_points_per_object",
                     "point_budget"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be a positive integer")
        if not 0 <= self.train_days <= self.days:
            bad("train_days", "must lie in [0, days]")
        for name in ("frame_rate", "max_range", "sensor_height", "pedestrian_speed", "cyclist_speed",
                     "point_density"):
            if not getattr(self, name) > 0:
                bad(name, "must be positive")
        if len(self.extent) != 2 or min(self.extent) <= 0:
            bad("extent", "both sides must be positive")
        for name in ("car_initial", "car_stay", "car_arrive", "dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                bad(name, "probability must lie in [0, 1]")
        for name in ("pedestrian_rate", "cyclist_rate", "noise_sigma", "feature_jitter"):
            if getattr(self, name) < 0:
                bad(name, "must be non-negative")
        if self.observation_mode not in ("noise", "perception"):
            bad("observation_mode", "must be 'noise' or 'perception'")
        validate_confusion(self.confusion, N_CLASSES)
        if self.car_schedule is not None:
            sched = np.asarray(self.car_schedule)
            if sched.shape != (self.days, 2 * self.slots_per_row) or not np.isin(sched, (0, 1)).all():
                bad("car_schedule", f"needs shape ({self.days}, {2 * self.slots_per_row}) of 0/1")

    @property
    def day_duration(self) -> float:
        return self.frames_per_day / self.frame_rate

    @property
    def frames_per_calendar_day(self) -> int:
        return int(round(SECONDS_PER_DAY * self.frame_rate))

    def sensor(self) -> SensorModel:
        return SensorModel(self.max_range, self.point_density, self.min_points, self.max_points_per_object,
                           self.noise_sigma, self.point_budget)

    def global_frame(self, day: int, k: int) -> int:
        return day * self.frames_per_calendar_day + k

    def timestamp(self, day: int, k: int) -> float:
        return day * SECONDS_PER_DAY + k / self.frame_rate

    def to_json(self) -> str:
        d = asdict(self)
        d["extent"] = list(self.extent)
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown scenario field(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"scenario: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"scenario file is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigurationError("scenario file must hold a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        if not path.exists():
            raise DataPathError(f"scenario file {path} does not exist")
        return cls.from_json(path.read_text())

    def save(self, path):
        Path(path).write_text(self.to_json())


def validate_confusion(matrix, n_classes: int = N_CLASSES) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (n_classes, n_classes):
        raise ArgumentError(f"confusion matrix must be {n_classes}x{n_classes}, got {m.shape}")
    if not np.isfinite(m).all() or (m < 0).any():
        raise ArgumentError("confusion matrix entries must be finite and non-negative")
    if np.abs(m.sum(axis=1) - 1.0).max() > 1e-9:
        raise ArgumentError("confusion matrix rows must sum to 1")
    return m


# ---------------------------------------------------------------- world


@dataclass
class Agent:
    label: int
    template: Shape  # shape at the origin
    waypoints: np.ndarray  # (K, 2)
    start: float  # seconds into the day
    speed: float

    def __post_init__(self):
        seg = np.diff(self.waypoints, axis=0)
        self._seglen = np.hypot(seg[:, 0], seg[:, 1])
        self._cum = np.concatenate([[0.0], np.cumsum(self._seglen)])

    @property
    def end(self) -> float:
        return self.start + self._cum[-1] / self.speed

    def shape_at(self, t: float) -> Optional[Shape]:
        if t < self.start or t > self.end:
            return None
        s = (t - self.start) * self.speed
        j = int(min(np.searchsorted(self._cum, s, side="right") - 1, len(self._seglen) - 1))
        u = (s - self._cum[j]) / self._seglen[j] if self._seglen[j] > 0 else 0.0
        p = self.waypoints[j] + u * (self.waypoints[j + 1] - self.waypoints[j])
        d = self.waypoints[j + 1] - self.waypoints[j]
        return self.template.moved(float(p[0]), float(p[1]), math.atan2(d[1], d[0]))


@dataclass
class World:
    config: ScenarioConfig
    static: List[Tuple[Shape, int]]
    slots: List[Tuple[float, float]]
    occupancy: np.ndarray  # (days, n_slots) bool
    cars: Dict[Tuple[int, int], Box]  # (day, slot) -> parked car
    agents: List[List[Agent]]  # per day

    def objects_at(self, day: int, t: float) -> List[Tuple[Shape, int]]:
        objs = list(self.static)
        for s in np.flatnonzero(self.occupancy[day]):
            objs.append((self.cars[(day, int(s))], int(SemanticClass.CAR)))
        for a in self.agents[day]:
            shape = a.shape_at(t)
            if shape is not None:
                objs.append((shape, a.label))
        return objs

    def robot_pose(self, t: float) -> Pose:
        """Constant-speed loop around the lot, one lap per day."""
        c = self.config
        hx, hy = c.extent[0] / 2 - 4.0, c.extent[1] / 2 - 4.5
        corners = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy], [-hx, -hy]])
        seg = np.hypot(*np.diff(corners, axis=0).T)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = (t / c.day_duration % 1.0) * cum[-1]
        j = int(min(np.searchsorted(cum, s, side="right") - 1, 3))
        d = corners[j + 1] - corners[j]
        p = corners[j] + (s - cum[j]) / seg[j] * d
        return Pose.from_yaw(float(p[0]), float(p[1]), c.sensor_height, math.atan2(d[1], d[0]))

    @property
    def robot_speed(self) -> float:
        c = self.config
        hx, hy = c.extent[0] / 2 - 4.0, c.extent[1] / 2 - 4.5
        return 4 * (hx + hy) / c.day_duration


def _static_layout(c: ScenarioConfig, rng: np.random.Generator) -> List[Tuple[Shape, int]]:
    bg = int(SemanticClass.BACKGROUND)
    W, H = c.extent
    out: List[Tuple[Shape, int]] = []
    panel = 5.0
    for sign in (-1, 1):
        n = int(round(W / panel))
        for k in range(n):
            x = -W / 2 + (k + 0.5) * W / n
            out.append((Box(x, sign * H / 2, W / n, 0.2, 2.2, 0.0), bg))
        n = int(round(H / panel))
        for k in range(n):
            y = -H / 2 + (k + 0.5) * H / n
            out.append((Box(sign * W / 2, y, H / n, 0.2, 2.2, math.pi / 2), bg))
    for y in (-H / 4, H / 4):
        for x in np.arange(-2, 3) * W / 6:
            out.append((Box(float(x), y, 0.3, 0.3, 4.0), bg))
    for x, y in ((-W / 2 + 2, H / 8), (-W / 2 + 2, -H / 8), (W / 2 - 2, H / 8), (-W / 4, H / 2 - 2.5)):
        out.append((Box(x, y + rng.uniform(-0.5, 0.5), rng.uniform(1.0, 1.8), rng.uniform(1.0, 1.8),
                        rng.uniform(0.6, 1.0), rng.uniform(0, math.pi)), bg))
    return out


def _car_rows(c: ScenarioConfig) -> List[Tuple[float, float]]:
    pitch = 2.5
    xs = (np.arange(c.slots_per_row) - (c.slots_per_row - 1) / 2) * pitch
    return [(float(x), y) for y in (-c.extent[1] * 0.15, c.extent[1] * 0.15) for x in xs]


def _paths(c: ScenarioConfig):
    """Named polylines (label, waypoints) the dynamic agents follow."""
    W, H = c.extent
    ped = int(SemanticClass.PEDESTRIAN)
    cyc = int(SemanticClass.CYCLIST)
    return [
        (ped, np.array([[-W / 2 + 1, 0.3 * H], [W / 6, 0.3 * H], [W / 6, H / 2 - 3]])),
        (ped, np.array([[-W / 2 + 1, 0.0], [W / 2 - 1, 0.0]])),
        (ped, np.array([[W / 2 - 3.5, 0.0], [W / 2 - 3.5, -H / 2 + 3]])),
        (cyc, np.array([[-W / 2 + 1, -0.3 * H], [W / 2 - 1, -0.3 * H]])),
    ]


def _spawn_agents(c: ScenarioConfig, rng: np.random.Generator) -> List[Agent]:
    agents = []
    for label, pts in _paths(c):
        rate = c.pedestrian_rate if label == SemanticClass.PEDESTRIAN else c.cyclist_rate
        speed0 = c.pedestrian_speed if label == SemanticClass.PEDESTRIAN else c.cyclist_speed
        per_path = rate / (3 if label == SemanticClass.PEDESTRIAN else 1)
        length = float(np.hypot(*np.diff(pts, axis=0).T).sum())
        lead = length / speed0
        n = int(rng.poisson(per_path * (c.day_duration + lead)))
        for _ in range(n):
            wp = pts[::-1].copy() if rng.random() < 0.5 else pts.copy()
            wp = wp + rng.uniform(-0.4, 0.4, size=2)
            speed = speed0 * rng.uniform(0.85, 1.15)
            start = rng.uniform(-lead, c.day_duration)
            if label == SemanticClass.PEDESTRIAN:
                template = make_pedestrian(rng, 0.0, 0.0)
            else:
                template = make_cyclist(rng, 0.0, 0.0, 0.0)
            agents.append(Agent(label, template, wp, start, speed))
    return agents


def generate_world(config: ScenarioConfig) -> World:
    """Seeded world: static furniture, per-day parked cars and moving agents."""
    if min(config.extent) <= 0:
        raise ArgumentError("world extent must be positive")
    rng = np.random.default_rng([config.seed, 0])
    static = _static_layout(config, rng)
    slots = _car_rows(config)
    n = len(slots)
    if config.car_schedule is not None:
        occ = np.asarray(config.car_schedule, dtype=bool)
    else:
        occ = np.zeros((config.days, n), bool)
        occ[0] = rng.random(n) < config.car_initial
        for d in range(1, config.days):
            u = rng.random(n)
            occ[d] = np.where(occ[d - 1], u < config.car_stay, u < config.car_arrive)
    cars = {}
    for d in range(config.days):
        for s in range(n):
            x, y = slots[s]
            car = make_car(rng, x + rng.uniform(-0.2, 0.2), y + rng.uniform(-0.2, 0.2),
                           math.pi / 2 + rng.uniform(-0.05, 0.05))
            if occ[d, s]:
                cars[(d, s)] = car
    agents = [_spawn_agents(config, rng) for _ in range(config.days)]
    return World(config, static, slots, occ, cars, agents)


def frame_rng(seed: int, stream: int, frame: int) -> np.random.Generator:
    """Independent generator per (purpose, frame) so frames can render in any order."""
    return np.random.default_rng([seed, stream, frame])


def render_scan(world: World, day: int, k: int) -> PointCloudScan:
    """Frame ``k`` of ``day``: sampled object surfaces with exact pose and labels."""
    c = world.config
    if not (0 <= day < c.days and 0 <= k < c.frames_per_day):
        raise ArgumentError(f"frame ({day}, {k}) is outside the scenario")
    t = k / c.frame_rate
    pose = world.robot_pose(t)
    g = c.global_frame(day, k)
    pts, labels, _ = render_points(world.objects_at(day, t), pose, c.sensor(), frame_rng(c.seed, 1, g))
    return PointCloudScan(c.timestamp(day, k), pose, pts, labels, g)


def scan_cell_labels(scan: PointCloudScan, resolution: float) -> Tuple[np.ndarray, np.ndarray]:
    """(unique keys, per-key label bitmask) of one labelled scan."""
    keys = cell_keys(scan.pose.apply(scan.points), resolution)
    if len(keys) == 0:
        return keys, np.zeros(0, np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    mask = np.zeros(len(uniq), np.int64)
    np.bitwise_or.at(mask, inv.ravel(), 1 << scan.labels)
    return uniq, mask


def ground_truth_from_masks(per_frame, resolution: float, day: int) -> GroundTruthMap:
    """Union per-frame (keys, label bitmask) pairs; more than one class -> DontCare."""
    per_frame = [p for p in per_frame if len(p[0])]
    if not per_frame:
        return GroundTruthMap(resolution, np.zeros((0, 3), np.int64), np.zeros(0, np.int64), day)
    keys = np.concatenate([p[0] for p in per_frame])
    masks = np.concatenate([p[1] for p in per_frame])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    acc = np.zeros(len(uniq), np.int64)
    np.bitwise_or.at(acc, inv.ravel(), masks)
    labels = np.full(len(uniq), int(SemanticClass.DONT_CARE), np.int64)
    single = (acc & (acc - 1)) == 0
    labels[single] = np.log2(acc[single]).astype(np.int64)
    return GroundTruthMap(resolution, uniq, labels, day)


def build_ground_truth(world: World, day: int, resolution: float,
                       scans: Optional[Sequence[PointCloudScan]] = None) -> GroundTruthMap:
    """Per-day voxel labels from every point sensed that day.

    A cell whose points came from more than one class during the day is
    DontCare. Pass already rendered ``scans`` to avoid rendering twice.
    """
    if not 0 <= day < world.config.days:
        raise ArgumentError(f"day {day} outside scenario of {world.config.days} days")
    if scans is None:
        scans = (render_scan(world, day, k) for k in range(world.config.frames_per_day))
    return ground_truth_from_masks((scan_cell_labels(s, resolution) for s in scans), resolution, day)


def inject_observation_noise(true_classes: np.ndarray, confusion, rng: np.random.Generator) -> np.ndarray:
    """Resample each object's class from the confusion row of its true class."""
    m = validate_confusion(confusion, np.shape(confusion)[0])
    true_classes = np.asarray(true_classes, dtype=np.int64)
    if len(true_classes) == 0:
        return true_classes.copy()
    cdf = np.cumsum(m, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(len(true_classes))
    out = (u[:, None] >= cdf[true_classes]).sum(axis=1)
    return np.minimum(out, m.shape[1] - 1)


def prototype_features(prototypes: np.ndarray, classes: np.ndarray, jitter: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Class prototype rows plus Gaussian jitter (scaled by the table RMS), clipped at zero."""
    base = prototypes[classes]
    if jitter <= 0 or len(classes) == 0:
        return base.copy()
    scale = jitter * float(np.sqrt(np.mean(prototypes ** 2)))
    return np.maximum(base + rng.normal(0.0, scale, size=base.shape), 0.0)


def dropout_mask(n_cells: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """True for cells whose observation survives this frame."""
    if p <= 0:
        return np.ones(n_cells, bool)
    return rng.random(n_cells) >= p
