"""Versioned weight files.

Binary layout (little-endian)::

    magic        8 bytes  b"ROCTWGT\\0"
    version      u32
    kind         u32      (see KIND_*)
    n_classes    u32
    n_dims       u32, then n_dims x u32 layer dims
    meta_len     u32, then meta_len bytes of UTF-8 JSON
    n_tensors    u32
    per tensor:  ndim u32, shape ndim x u32, row-major float64 data

The JSON text export carries exactly the same content; floats are written
with ``repr`` precision so text round-trips are lossless too.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from ..errors import FormatError
from .lstm import LSTMLayer, LSTMParams
from .mlp import Dense, MLPParams

MAGIC = b"ROCTWGT\x00"
VERSION = 1
KIND_LSTM = 1
KIND_MLP_GROUP = 2
KIND_OPTIMIZER = 3
KIND_NAMES = {KIND_LSTM: "lstm", KIND_MLP_GROUP: "mlp_group", KIND_OPTIMIZER: "optimizer"}


@dataclass
class WeightBundle:
    kind: int
    n_classes: int
    dims: List[int]
    tensors: List[np.ndarray]
    meta: Dict = field(default_factory=dict)


def bundle_to_bytes(b: WeightBundle) -> bytes:
    meta = json.dumps(b.meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IIII", VERSION, b.kind, b.n_classes, len(b.dims)),
             struct.pack(f"<{len(b.dims)}I", *b.dims), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(b.tensors))]
    for t in b.tensors:
        t = np.ascontiguousarray(t, dtype="<f8")
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(t.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int, field_name: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated while reading {field_name}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, field_name: str, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count, field_name))
        return vals[0] if count == 1 else list(vals)


def bundle_from_bytes(data: bytes, what: str = "weights file") -> WeightBundle:
    r = _Reader(data, what)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError(f"{what}: bad magic (not a weight file)")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported format version {version} (expected {VERSION})")
    kind = r.u32("kind")
    if kind not in KIND_NAMES:
        raise FormatError(f"{what}: unknown kind {kind}")
    n_classes = r.u32("n_classes")
    n_dims = r.u32("n_dims")
    dims = r.u32("dims", n_dims) if n_dims else []
    if n_dims == 1:
        dims = [dims]
    meta_len = r.u32("meta_len")
    try:
        meta = json.loads(r.take(meta_len, "meta").decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: corrupt meta block ({exc})") from None
    n_tensors = r.u32("n_tensors")
    tensors = []
    for j in range(n_tensors):
        ndim = r.u32(f"tensor {j} ndim")
        shape = r.u32(f"tensor {j} shape", ndim) if ndim else []
        if ndim == 1:
            shape = [shape]
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * count, f"tensor {j} values")
        tensors.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes after tensor {n_tensors - 1}")
    return WeightBundle(kind, n_classes, list(dims), tensors, meta)


def bundle_to_text(b: WeightBundle) -> str:
    doc = {
        "magic": MAGIC.rstrip(b"\x00").decode(),
        "version": VERSION,
        "kind": KIND_NAMES[b.kind],
        "n_classes": b.n_classes,
        "dims": list(b.dims),
        "meta": b.meta,
        "tensors": [{"shape": list(t.shape), "data": [float(v) for v in np.ravel(t)]}
                    for t in b.tensors],
    }
    return json.dumps(doc, indent=1)


def bundle_from_text(text: str) -> WeightBundle:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"weights text: not JSON ({exc})") from None
    for key in ("magic", "version", "kind", "n_classes", "dims", "tensors"):
        if key not in doc:
            raise FormatError(f"weights text: missing field {key!r}")
    if doc["version"] != VERSION:
        raise FormatError(f"weights text: unsupported format version {doc['version']}")
    kinds = {v: k for k, v in KIND_NAMES.items()}
    if doc["kind"] not in kinds:
        raise FormatError(f"weights text: unknown kind {doc['kind']!r}")
    tensors = []
    for j, t in enumerate(doc["tensors"]):
        arr = np.array(t["data"], dtype=np.float64)
        if arr.size != int(np.prod(t["shape"])):
            raise FormatError(f"weights text: tensor {j} has {arr.size} values for shape {t['shape']}")
        tensors.append(arr.reshape(t["shape"]))
    return WeightBundle(kinds[doc["kind"]], doc["n_classes"], doc["dims"], tensors, doc.get("meta", {}))


def lstm_to_bundle(params: LSTMParams, meta: Dict | None = None) -> WeightBundle:
    return WeightBundle(KIND_LSTM, params.num_classes,
                        [params.input_dim, params.hidden_dim, params.num_layers],
                        params.tensors(), dict(meta or {}))


def lstm_from_bundle(b: WeightBundle) -> LSTMParams:
    if b.kind != KIND_LSTM:
        raise FormatError(f"expected an LSTM weight file, found kind {KIND_NAMES.get(b.kind)}")
    if len(b.dims) != 3:
        raise FormatError("LSTM weight file: dims must be [input_dim, hidden_dim, num_layers]")
    _, _, n_layers = b.dims
    if len(b.tensors) != 3 * n_layers + 2:
        raise FormatError(f"LSTM weight file: expected {3 * n_layers + 2} tensors, "
                          f"found {len(b.tensors)}")
    t = b.tensors
    layers = [LSTMLayer(t[3 * k], t[3 * k + 1], t[3 * k + 2]) for k in range(n_layers)]
    try:
        params = LSTMParams(layers, t[-2], t[-1])
    except Exception as exc:  # shape validation inside LSTMParams
        raise FormatError(f"LSTM weight file: {exc}") from None
    if params.num_classes != b.n_classes:
        raise FormatError("LSTM weight file: decoder size disagrees with class count")
    return params


def mlps_to_bundle(mlps: Dict[str, MLPParams], n_classes: int, extra: Dict[str, np.ndarray] | None = None,
                   meta: Dict | None = None) -> WeightBundle:
    dims, tensors = [len(mlps)], []
    layout = {"mlps": [], "extra": []}
    for name, p in mlps.items():
        dims += [len(p.sizes)] + p.sizes
        layout["mlps"].append({"name": name, "activations": [l.activation for l in p.layers]})
        tensors += p.tensors()
    for name, arr in (extra or {}).items():
        layout["extra"].append(name)
        tensors.append(np.asarray(arr, dtype=np.float64))
    m = dict(meta or {})
    m["layout"] = layout
    return WeightBundle(KIND_MLP_GROUP, n_classes, dims, tensors, m)


def mlps_from_bundle(b: WeightBundle):
    if b.kind != KIND_MLP_GROUP:
        raise FormatError(f"expected an MLP weight file, found kind {KIND_NAMES.get(b.kind)}")
    layout = b.meta.get("layout")
    if not layout:
        raise FormatError("MLP weight file: missing layout in meta")
    pos, t_pos, mlps = 1, 0, {}
    for entry in layout["mlps"]:
        n = b.dims[pos]
        sizes = b.dims[pos + 1:pos + 1 + n]
        pos += 1 + n
        layers = []
        for k, act in enumerate(entry["activations"]):
            w, bias = b.tensors[t_pos], b.tensors[t_pos + 1]
            t_pos += 2
            if w.shape != (sizes[k + 1], sizes[k]):
                raise FormatError(f"MLP {entry['name']!r} layer {k}: weight shape {w.shape} "
                                  f"disagrees with dims")
            layers.append(Dense(w, bias, act))
        mlps[entry["name"]] = MLPParams(layers)
    extra = {name: b.tensors[t_pos + j] for j, name in enumerate(layout["extra"])}
    return mlps, extra


def write_bundle(path, b: WeightBundle):
    Path(path).write_bytes(bundle_to_bytes(b))


def read_bundle(path) -> WeightBundle:
    path = Path(path)
    if not path.exists():
        from ..errors import DataPathError
        raise DataPathError(f"weight file {path} does not exist")
    return bundle_from_bytes(path.read_bytes(), what=str(path))


def save_lstm(path, params: LSTMParams, meta: Dict | None = None):
    write_bundle(path, lstm_to_bundle(params, meta))


def load_lstm(path):
    b = read_bundle(path)
    return lstm_from_bundle(b), b.meta
