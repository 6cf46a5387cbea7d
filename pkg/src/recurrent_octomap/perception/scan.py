"""Point-cloud scans and their ASCII file format.

A scan file starts with one header line::

    # roct-scan 1 <timestamp> <frame> <tx> <ty> <tz> <qw> <qx> <qy> <qz>

followed by one ``x y z label`` line per point (label -1 when unknown).
Floats are written with 17 significant digits so files round-trip exactly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..errors import ArgumentError, DataPathError, FormatError
from ..geometry import Pose

log = logging.getLogger(__name__)

SCAN_MAGIC = "roct-scan"
SCAN_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class PointCloudScan:
    timestamp: float
    pose: Pose
    points: np.ndarray  # (N, 3) sensor frame, meters
    labels: Optional[np.ndarray] = None  # (N,) true class per point, simulator only
    frame: int = -1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ArgumentError("scan contains non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ArgumentError(
                    f"{len(self.labels)} labels for {len(self.points)} points")
        self.pose.validate()

    def __len__(self):
        return len(self.points)


def _fmt(v: float) -> str:
    return "%.17g" % v


def scan_to_text(scan: PointCloudScan) -> str:
    q = scan.pose.quaternion()
    head = [SCAN_MAGIC, str(SCAN_VERSION), _fmt(scan.timestamp), str(int(scan.frame))]
    head += [_fmt(v) for v in scan.pose.translation] + [_fmt(v) for v in q]
    lines = ["# " + " ".join(head)]
    labels = scan.labels if scan.labels is not None else np.full(len(scan), -1)
    for p, lab in zip(scan.points.tolist(), labels.tolist()):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {lab}")
    return "\n".join(lines) + "\n"


def scan_from_text(text: str, what: str = "scan") -> PointCloudScan:
    first, _, body = text.partition("\n")
    parts = first.split()
    if len(parts) != 12 or parts[0] != "#" or parts[1] != SCAN_MAGIC:
        raise FormatError(f"{what}: bad header line")
    if parts[2] != str(SCAN_VERSION):
        raise FormatError(f"{what}: unsupported version {parts[2]}")
    try:
        timestamp = float(parts[3])
        frame = int(parts[4])
        vals = [float(v) for v in parts[5:]]
    except ValueError as exc:
        raise FormatError(f"{what}: malformed header field ({exc})") from None
    pose = Pose.from_quaternion(vals[3:], vals[:3])
    try:
        data = np.array(body.split(), dtype=np.float64)
    except ValueError:
        raise FormatError(f"{what}: non-numeric point data") from None
    if data.size % 4:
        raise FormatError(f"{what}: point lines must have 4 fields")
    data = data.reshape(-1, 4)
    labels = data[:, 3].astype(np.int64)
    if not np.array_equal(labels, data[:, 3]):
        raise FormatError(f"{what}: non-integer label")
    try:
        return PointCloudScan(timestamp, pose, data[:, :3],
                              None if (labels < 0).all() and len(labels) else labels, frame)
    except ArgumentError as exc:
        raise FormatError(f"{what}: {exc}") from None


def write_scan(path, scan: PointCloudScan):
    Path(path).write_text(scan_to_text(scan))


def read_scan(path) -> PointCloudScan:
    path = Path(path)
    if not path.exists():
        raise DataPathError(f"scan file not found: {path}")
    return scan_from_text(path.read_text(), what=str(path))


def write_corpus(directory, scans: List[PointCloudScan], extra: dict | None = None) -> Path:
    """A corpus is a directory of scan files plus a JSON manifest listing them in order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, scan in enumerate(scans):
        name = f"scan_{k:06d}.txt"
        write_scan(directory / name, scan)
        entries.append({"file": name, "timestamp": scan.timestamp, "frame": scan.frame,
                        "points": len(scan)})
    manifest = {"format": SCAN_MAGIC, "version": SCAN_VERSION, "scans": entries}
    if extra:
        manifest.update(extra)
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def read_corpus_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DataPathError(f"no corpus manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if manifest.get("format") != SCAN_MAGIC or "scans" not in manifest:
        raise FormatError(f"{path}: not a scan corpus manifest")
    return manifest


def read_corpus(directory) -> List[PointCloudScan]:
    manifest = read_corpus_manifest(directory)
    return [read_scan(Path(directory) / e["file"]) for e in manifest["scans"]]
