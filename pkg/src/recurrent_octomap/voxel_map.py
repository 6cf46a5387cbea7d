"""Sparse semantic voxel map with per-cell occupancy, pooled features,
recurrent state, class probabilities and time-based retention."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .errors import ArgumentError, ConfigurationError, DataPathError, FormatError

log = logging.getLogger(__name__)

CellKey = Tuple[int, int, int]

MAP_MAGIC = b"ROCTMAP\0"
MAP_VERSION = 1


@dataclass(frozen=True)
class MapConfig:
    resolution: float = 0.4
    retention_window: float = 300.0  # seconds
    hit: float = 0.85
    miss: float = -0.4
    clamp_min: float = -3.5
    clamp_max: float = 3.5
    ray_updates: bool = False
    frame_rate: float = 10.0

    def __post_init__(self):
        if not (self.resolution > 0 and math.isfinite(self.resolution)):
            raise ConfigurationError("map resolution must be positive")
        if self.retention_window < 0:
            raise ConfigurationError("retention window must be non-negative")
        if not self.clamp_min < self.clamp_max:
            raise ConfigurationError("occupancy clamp_min must be below clamp_max")
        if self.frame_rate <= 0:
            raise ConfigurationError("frame rate must be positive")


def cell_keys(points: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / resolution).astype(np.int64)


def to_map_frame(scan) -> np.ndarray:
    """Sensor-frame points of ``scan`` expressed in the map frame."""
    scan.pose.validate()
    return scan.pose.apply(scan.points)


@dataclass
class Cell:
    key: CellKey
    occupancy: float
    feature: np.ndarray
    state: Optional[np.ndarray]  # (layers, 2, hidden): [S, h] per layer
    prob: Optional[np.ndarray]
    last_obs_time: float
    last_obs_frame: int
    label: int = -1


@dataclass
class CellObservations:
    """Per-cell pooled payload of one frame, cells in ascending key order."""
    keys: np.ndarray  # (K, 3)
    features: np.ndarray  # (K, F) mean point feature (f_cell)
    counts: np.ndarray  # (K,)
    probs: Optional[np.ndarray] = None  # (K, C) mean point class probabilities


def pool_by_cell(points_map: np.ndarray, features: np.ndarray, resolution: float,
                 probs: Optional[np.ndarray] = None) -> CellObservations:
    """Average per-point payloads per voxel in a canonical order.

    Members are sorted by (key, coordinates, payload) before a sequential
    sum, so the result does not depend on the input point order.
    """
    points_map = np.asarray(points_map, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != len(points_map):
        raise ArgumentError(f"need one feature row per point, got {features.shape} for {len(points_map)}")
    width = features.shape[1]
    if len(points_map) == 0:
        return CellObservations(np.zeros((0, 3), np.int64), np.zeros((0, width)), np.zeros(0, np.int64),
                                None if probs is None else np.zeros((0, np.shape(probs)[1])))
    keys = cell_keys(points_map, resolution)
    payload = features if probs is None else np.hstack([features, probs])
    columns = [payload[:, j] for j in range(payload.shape[1] - 1, -1, -1)]
    columns += [points_map[:, 2], points_map[:, 1], points_map[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]]
    order = np.lexsort(columns)
    k_sorted = keys[order]
    starts = np.concatenate([[0], np.flatnonzero(np.any(np.diff(k_sorted, axis=0) != 0, axis=1)) + 1])
    counts = np.diff(np.concatenate([starts, [len(order)]]))
    # strict left-to-right sum per cell; reduceat may reassociate
    sorted_payload = payload[order]
    sums = sorted_payload[starts].copy()
    for step in range(1, int(counts.max())):
        live = np.flatnonzero(counts > step)
        sums[live] += sorted_payload[starts[live] + step]
    means = sums / counts[:, None]
    return CellObservations(k_sorted[starts], means[:, :width], counts,
                            None if probs is None else means[:, width:])


class VoxelMap:
    """Hash-indexed voxel storage; fields are kept column-wise by row.

    Only leaf cells at one resolution exist. Rows are created in ascending key
    order within a frame, and removal compacts the columns.
    """

    def __init__(self, config: MapConfig = MapConfig(), feature_dim: int = 0,
                 state_shape: Optional[Tuple[int, int]] = None, n_classes: int = 0):
        self.config = config
        self.feature_dim = int(feature_dim)
        self.state_shape = None if state_shape is None else (int(state_shape[0]), int(state_shape[1]))
        self.n_classes = int(n_classes)
        self.latest_time = -math.inf
        self._index: Dict[CellKey, int] = {}
        self._n = 0
        self._alloc(16)

    # ------------------------------------------------------------ storage
    def _alloc(self, cap: int):
        L, H = self.state_shape or (0, 0)
        self.keys = np.zeros((cap, 3), np.int64)
        self.occupancy = np.zeros(cap)
        self.feature = np.zeros((cap, self.feature_dim))
        self.state = np.zeros((cap, L, 2, H))
        self.prob = np.zeros((cap, self.n_classes))
        self.prob_set = np.zeros(cap, bool)
        self.last_time = np.zeros(cap)
        self.last_frame = np.zeros(cap, np.int64)
        self.label = np.full(cap, -1, np.int64)

    _COLUMNS = ("keys", "occupancy", "feature", "state", "prob", "prob_set", "last_time", "last_frame",
                "label")

    def _grow(self, need: int):
        cap = len(self.keys)
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in self._COLUMNS:
            old = getattr(self, name)
            arr = np.zeros((new_cap,) + old.shape[1:], old.dtype)
            if name == "label":
                arr[:] = -1
            arr[:self._n] = old[:self._n]
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self._n

    def __contains__(self, key) -> bool:
        return tuple(int(v) for v in key) in self._index

    def row(self, key) -> int:
        try:
            return self._index[tuple(int(v) for v in key)]
        except KeyError:
            raise KeyError(f"cell {tuple(key)} not in map") from None

    def rows_for(self, keys: np.ndarray, create: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """Row per key plus a mask of which rows were just created."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        rows = np.empty(len(keys), np.int64)
        new = np.zeros(len(keys), bool)
        for j, k in enumerate(map(tuple, keys.tolist())):
            r = self._index.get(k)
            if r is None:
                if not create:
                    raise KeyError(f"cell {k} not in map")
                new[j] = True
                r = -1
            rows[j] = r
        if new.any():
            idx = np.flatnonzero(new)
            self._grow(self._n + len(idx))
            fresh = np.arange(self._n, self._n + len(idx))
            self.keys[fresh] = keys[idx]
            for r, k in zip(fresh.tolist(), map(tuple, keys[idx].tolist())):
                self._index[k] = r
            rows[idx] = fresh
            self._n += len(idx)
        return rows, new

    def active_keys(self) -> np.ndarray:
        return self.keys[:self._n].copy()

    def cell(self, key) -> Cell:
        r = self.row(key)
        return Cell(tuple(int(v) for v in self.keys[r]), float(self.occupancy[r]), self.feature[r].copy(),
                    self.state[r].copy() if self.state_shape else None,
                    self.prob[r].copy() if self.prob_set[r] else None,
                    float(self.last_time[r]), int(self.last_frame[r]), int(self.label[r]))

    def cells(self) -> Iterable[Cell]:
        for k in list(self._index):
            yield self.cell(k)

    # ------------------------------------------------------------ updates
    def _check_time(self, time: float):
        if time < self.latest_time:
            raise ArgumentError(f"stale timestamp {time} < latest {self.latest_time}")

    def observe(self, obs: CellObservations, time: float, frame: int):
        """Apply one frame of pooled cell observations.

        Returns ``(rows, prev_frame)`` where ``prev_frame`` is -1 for cells
        created by this call.
        """
        self._check_time(time)
        if obs.features.shape[1] != self.feature_dim:
            raise ConfigurationError(f"f_cell has {obs.features.shape[1]} dims, map stores {self.feature_dim}")
        rows, new = self.rows_for(obs.keys, create=True)
        prev = self.last_frame[rows].copy()
        prev[new] = -1
        c = self.config
        self.occupancy[rows] = np.clip(self.occupancy[rows] + c.hit, c.clamp_min, c.clamp_max)
        self.feature[rows] = obs.features
        self.last_time[rows] = time
        self.last_frame[rows] = frame
        self.latest_time = time
        return rows, prev

    def insert_points(self, points_map: np.ndarray, features: np.ndarray, time: float, frame: int = -1,
                      probs: Optional[np.ndarray] = None, origin: Optional[np.ndarray] = None):
        self._check_time(time)
        obs = pool_by_cell(points_map, features, self.config.resolution, probs)
        if self.config.ray_updates and origin is not None and len(points_map):
            self._free_space(np.asarray(origin, dtype=np.float64), np.asarray(points_map), obs.keys)
        rows, prev = self.observe(obs, time, frame)
        return obs, rows, prev

    def insert_scan(self, scan, features: np.ndarray, time: Optional[float] = None,
                    probs: Optional[np.ndarray] = None):
        """Bucket a scan's propagated point features into cells (f_cell = member mean)."""
        t = scan.timestamp if time is None else time
        return self.insert_points(to_map_frame(scan), features, t, scan.frame, probs,
                                  origin=scan.pose.translation)

    def _free_space(self, origin: np.ndarray, points: np.ndarray, hit_keys: np.ndarray):
        """Miss update for existing cells crossed by rays (sampled at half-voxel steps)."""
        res = self.config.resolution
        hit = {tuple(k) for k in hit_keys.tolist()}
        crossed = set()
        for p in points:
            d = p - origin
            n = int(np.linalg.norm(d) / (0.5 * res))
            if n < 2:
                continue
            ts = np.arange(1, n) / n
            for k in map(tuple, cell_keys(origin + ts[:, None] * d, res).tolist()):
                if k not in hit and k in self._index:
                    crossed.add(k)
        if crossed:
            rows = np.array(sorted(self._index[k] for k in crossed))
            c = self.config
            self.occupancy[rows] = np.clip(self.occupancy[rows] + c.miss, c.clamp_min, c.clamp_max)

    def prune_expired(self, now: float):
        """Drop every cell unobserved for longer than the retention window.

        Returns the removed cells as ``(keys, state, last_frame)`` arrays so a
        caller may keep recurrent memory elsewhere if it wants to.
        """
        n = self._n
        expired = (now - self.last_time[:n]) > self.config.retention_window
        if not expired.any():
            return np.zeros((0, 3), np.int64), self.state[:0].copy(), np.zeros(0, np.int64)
        gone = np.flatnonzero(expired)
        removed = (self.keys[gone].copy(), self.state[gone].copy(), self.last_frame[gone].copy())
        self._keep_rows(np.flatnonzero(~expired))
        return removed

    def _keep_rows(self, keep: np.ndarray):
        for name in self._COLUMNS:
            arr = getattr(self, name)
            arr[:len(keep)] = arr[keep]
        self._n = len(keep)
        self._index = {k: r for r, k in enumerate(map(tuple, self.keys[:self._n].tolist()))}

    def set_cell(self, key, occupancy=0.0, feature=None, state=None, prob=None, last_obs_time=0.0,
                 last_obs_frame=0, label=-1) -> int:
        """Create or overwrite one cell directly (fixtures, ground-truth maps)."""
        (r,), _ = self.rows_for(np.array([key]), create=True)
        self.occupancy[r] = occupancy
        if feature is not None:
            self.feature[r] = feature
        if state is not None:
            self.state[r] = state
        if prob is not None:
            self.prob[r] = prob
            self.prob_set[r] = True
        self.last_time[r] = last_obs_time
        self.last_frame[r] = last_obs_frame
        self.label[r] = label
        self.latest_time = max(self.latest_time, last_obs_time)
        return r

    # ------------------------------------------------------------ persistence
    def _record_dtype(self) -> np.dtype:
        L, H = self.state_shape or (0, 0)
        return np.dtype([
            ("key", "<i8", (3,)), ("occupancy", "<f8"), ("feature_dim", "<u4"),
            ("feature", "<f8", (self.feature_dim,)), ("state_layers", "<u4"), ("state_hidden", "<u4"),
            ("state", "<f8", (L, 2, H)), ("prob_set", "u1"), ("prob", "<f8", (self.n_classes,)),
            ("last_obs_time", "<f8"), ("last_obs_frame", "<i8"), ("label", "<i4"),
        ])

    def to_bytes(self) -> bytes:
        n = self._n
        rec = np.zeros(n, self._record_dtype())
        L, H = self.state_shape or (0, 0)
        rec["key"] = self.keys[:n]
        rec["occupancy"] = self.occupancy[:n]
        rec["feature_dim"] = self.feature_dim
        rec["feature"] = self.feature[:n]
        rec["state_layers"] = L
        rec["state_hidden"] = H
        rec["state"] = self.state[:n]
        rec["prob_set"] = self.prob_set[:n]
        rec["prob"] = self.prob[:n]
        rec["last_obs_time"] = self.last_time[:n]
        rec["last_obs_frame"] = self.last_frame[:n]
        rec["label"] = self.label[:n]
        cfg = json.dumps(asdict(self.config), sort_keys=True).encode()
        head = MAP_MAGIC + struct.pack("<I", MAP_VERSION) + struct.pack("<d", self.config.resolution)
        head += struct.pack("<Q", n)
        head += struct.pack("<IIII", self.feature_dim, L, H, self.n_classes)
        head += struct.pack("<d", self.latest_time)
        head += struct.pack("<I", len(cfg)) + cfg
        return head + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, what: str = "map snapshot") -> "VoxelMap":
        pos = 0

        def take(n, name):
            nonlocal pos
            if pos + n > len(data):
                raise FormatError(f"{what}: truncated while reading {name}")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        if take(len(MAP_MAGIC), "magic") != MAP_MAGIC:
            raise FormatError(f"{what}: bad magic (not a map snapshot)")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != MAP_VERSION:
            raise FormatError(f"{what}: unsupported version {version}")
        (resolution,) = struct.unpack("<d", take(8, "resolution"))
        (count,) = struct.unpack("<Q", take(8, "cell count"))
        fdim, L, H, C = struct.unpack("<IIII", take(16, "dims"))
        (latest,) = struct.unpack("<d", take(8, "latest time"))
        (clen,) = struct.unpack("<I", take(4, "config length"))
        try:
            cfg = json.loads(take(clen, "config").decode())
            config = MapConfig(**cfg)
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{what}: bad config block ({exc})") from None
        if config.resolution != resolution:
            raise FormatError(f"{what}: resolution field disagrees with config")
        m = cls(config, fdim, (L, H) if L or H else None, C)
        dt = m._record_dtype()
        body = take(dt.itemsize * count, "cell records")
        if pos != len(data):
            raise FormatError(f"{what}: trailing bytes after cell records")
        rec = np.frombuffer(body, dtype=dt, count=count)
        if count and (rec["feature_dim"] != fdim).any():
            raise FormatError(f"{what}: per-cell feature_dim disagrees with header")
        if count and ((rec["state_layers"] != L).any() or (rec["state_hidden"] != H).any()):
            raise FormatError(f"{what}: per-cell state dims disagree with header")
        m._grow(count)
        m.keys[:count] = rec["key"]
        m.occupancy[:count] = rec["occupancy"]
        m.feature[:count] = rec["feature"]
        m.state[:count] = rec["state"]
        m.prob_set[:count] = rec["prob_set"].astype(bool)
        m.prob[:count] = rec["prob"]
        m.last_time[:count] = rec["last_obs_time"]
        m.last_frame[:count] = rec["last_obs_frame"]
        m.label[:count] = rec["label"]
        m._n = count
        m._index = {k: r for r, k in enumerate(map(tuple, m.keys[:count].tolist()))}
        if len(m._index) != count:
            raise FormatError(f"{what}: duplicate cell keys")
        m.latest_time = latest
        return m

    def snapshot(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VoxelMap":
        path = Path(path)
        if not path.exists():
            raise DataPathError(f"map snapshot {path} does not exist")
        return cls.from_bytes(path.read_bytes(), what=str(path))

    def equals(self, other: "VoxelMap") -> bool:
        """Bitwise equality of every stored field (row order included)."""
        if (self._n, self.feature_dim, self.state_shape, self.n_classes, self.config) != \
                (other._n, other.feature_dim, other.state_shape, other.n_classes, other.config):
            return False
        n = self._n
        return all(getattr(self, c)[:n].tobytes() == getattr(other, c)[:n].tobytes() for c in self._COLUMNS)


@dataclass
class GroundTruthMap:
    """One day's voxel labels, keys kept in ascending order."""
    resolution: float
    keys: np.ndarray  # (K, 3)
    labels: np.ndarray  # (K,)
    day: int = -1

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.keys):
            raise ArgumentError("ground truth needs one label per key")

    def as_dict(self) -> Dict[CellKey, int]:
        return {tuple(k): int(l) for k, l in zip(self.keys.tolist(), self.labels.tolist())}

    def to_voxel_map(self) -> VoxelMap:
        m = VoxelMap(MapConfig(resolution=self.resolution))
        m.rows_for(self.keys, create=True)
        m.label[:len(self.keys)] = self.labels
        m.last_frame[:len(self.keys)] = self.day
        return m

    @classmethod
    def from_voxel_map(cls, m: VoxelMap) -> "GroundTruthMap":
        n = len(m)
        day = int(m.last_frame[0]) if n else -1
        return cls(m.config.resolution, m.keys[:n].copy(), m.label[:n].copy(), day)

    def save(self, path):
        self.to_voxel_map().snapshot(path)

    @classmethod
    def load(cls, path) -> "GroundTruthMap":
        return cls.from_voxel_map(VoxelMap.load(path))
