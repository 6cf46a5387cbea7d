"""Per-cell semantic fusion backends: Bayesian product, plain LSTM and the
napping LSTM that freezes its state across bounded observation gaps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .neural import PROB_FLOOR, LSTMParams, decode, lstm_step
from .voxel_map import CellObservations, VoxelMap

BAYES, LSTM, NAPLSTM = "bayes", "lstm", "naplstm"
BACKENDS = (BAYES, LSTM, NAPLSTM)
SECONDS_PER_DAY = 86400
INFINITE = math.inf


def parse_mntd(value, frame_rate: float = 10.0) -> float:
    """Frames from an int, 'inf', 'day', or a seconds string such as '30s'."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if value < 0 or (isinstance(value, float) and math.isnan(value)):
            raise ArgumentError(f"MNTD must be non-negative, got {value}")
        return float(value) if math.isinf(value) else float(int(value))
    text = str(value).strip().lower()
    if text in ("inf", "infinity", "∞"):
        return INFINITE
    if text == "day":
        return float(round(SECONDS_PER_DAY * frame_rate))
    try:
        if text.endswith("s"):
            return parse_mntd(int(round(float(text[:-1]) * frame_rate)))
        return parse_mntd(int(text))
    except ValueError:
        raise ArgumentError(f"cannot read MNTD {value!r}: use frames, 'day', 'inf' or '<seconds>s'") from None


def format_mntd(mntd: float, frame_rate: float = 10.0) -> str:
    if math.isinf(mntd):
        return "inf"
    if mntd == round(SECONDS_PER_DAY * frame_rate):
        return "day"
    return str(int(mntd))


def bayes_update(prior: np.ndarray, likelihood: np.ndarray) -> np.ndarray:
    """posterior ∝ prior ⊙ likelihood, in log space with a per-class floor."""
    prior = np.asarray(prior, dtype=np.float64)
    likelihood = np.asarray(likelihood, dtype=np.float64)
    if prior.shape != likelihood.shape:
        raise ArgumentError(f"prior {prior.shape} and likelihood {likelihood.shape} differ")
    if (prior < 0).any() or (likelihood < 0).any():
        raise ArgumentError("probabilities must be non-negative")
    z = np.log(np.maximum(prior, PROB_FLOOR)) + np.log(np.maximum(likelihood, PROB_FLOOR))
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def uniform(n_classes: int, rows: Optional[int] = None) -> np.ndarray:
    shape = (n_classes,) if rows is None else (rows, n_classes)
    return np.full(shape, 1.0 / n_classes)


def nap_keep(prev_frame, frame, mntd: float) -> np.ndarray:
    """True where a state survives: at most ``mntd`` frames were missed in between."""
    prev = np.asarray(prev_frame, dtype=np.int64)
    now = np.asarray(frame, dtype=np.int64)
    gap = now - prev
    if (gap < 0).any():
        raise ArgumentError("observation gap is negative (events out of order)")
    return (gap - 1) <= mntd


def nap_gate(state: np.ndarray, last_frame: int, frame: int, mntd: float) -> np.ndarray:
    """Pass ``state`` through unchanged across the gap, or return zeros."""
    if bool(nap_keep(last_frame, frame, mntd)):
        return state
    return np.zeros_like(state)


def recurrent_update(params: LSTMParams, state: np.ndarray, f_cell: np.ndarray):
    """Advance cell states (B, L, 2, H) or (L, 2, H) by one observation; returns (state, prob)."""
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 3
    x = np.asarray(f_cell, dtype=np.float64)
    if single:
        state, x = state[None], x[None]
    if x.shape[-1] != params.input_dim:
        raise ConfigurationError(f"f_cell has {x.shape[-1]} dims, LSTM expects {params.input_dim}")
    S_prev = np.ascontiguousarray(state[:, :, 0].transpose(1, 0, 2))
    h_prev = np.ascontiguousarray(state[:, :, 1].transpose(1, 0, 2))
    S, h = lstm_step(params, x, S_prev, h_prev)
    out = np.stack([S.transpose(1, 0, 2), h.transpose(1, 0, 2)], axis=2)
    prob = decode(params, h[-1])
    if single:
        return out[0], prob[0]
    return out, prob


@dataclass
class FusionBackend:
    """Backend tag plus the LSTM weights shared by every cell."""
    kind: str
    params: Optional[LSTMParams] = None
    mntd: float = INFINITE
    n_classes: int = 4

    def __post_init__(self):
        if self.kind not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}, got {self.kind!r}")
        if self.kind != BAYES:
            if self.params is None:
                raise ConfigurationError(f"backend {self.kind!r} needs LSTM weights")
            self.n_classes = self.params.num_classes
        if self.kind == LSTM:
            self.mntd = 0.0
        if self.mntd < 0:
            raise ConfigurationError("MNTD must be non-negative")

    @classmethod
    def bayes(cls, n_classes: int = 4) -> "FusionBackend":
        return cls(BAYES, n_classes=n_classes)

    @classmethod
    def standard(cls, params: LSTMParams) -> "FusionBackend":
        return cls(LSTM, params, 0.0)

    @classmethod
    def nap(cls, params: LSTMParams, mntd: float) -> "FusionBackend":
        return cls(NAPLSTM, params, mntd)

    @property
    def recurrent(self) -> bool:
        return self.kind != BAYES

    def label(self, frame_rate: float = 10.0) -> str:
        if self.kind == NAPLSTM:
            return f"naplstm[{format_mntd(self.mntd, frame_rate)}]"
        return self.kind


def fuse_stream(frames: Sequence[int], payloads: np.ndarray, backend: FusionBackend) -> np.ndarray:
    """Fuse one cell's time-sorted events; returns the prob after each event (T, C)."""
    frames = np.asarray(frames, dtype=np.int64)
    payloads = np.asarray(payloads, dtype=np.float64)
    if len(frames) != len(payloads):
        raise ArgumentError("one payload per event is required")
    if len(frames) > 1 and (np.diff(frames) < 0).any():
        raise ArgumentError("events must be sorted by frame")
    out = np.empty((len(frames), backend.n_classes))
    if backend.kind == BAYES:
        prob = uniform(backend.n_classes)
        for t, lik in enumerate(payloads):
            prob = bayes_update(prob, lik)
            out[t] = prob
        return out
    p = backend.params
    state = np.zeros((p.num_layers, 2, p.hidden_dim))
    for t in range(len(frames)):
        if t > 0:
            state = nap_gate(state, frames[t - 1], frames[t], backend.mntd)
        state, out[t] = recurrent_update(p, state, payloads[t])
    return out


class FusionEngine:
    """Applies a backend to the cells a voxel map receives frame by frame.

    With ``keep_pruned_state`` the recurrent state of cells dropped by the
    retention rule is parked (with its last frame) and restored, nap-gated,
    if the cell is observed again. Bayesian posteriors are never parked.
    """

    def __init__(self, backend: FusionBackend, keep_pruned_state: bool = True):
        self.backend = backend
        self.keep_pruned_state = keep_pruned_state
        self.parked: Dict[Tuple[int, int, int], Tuple[np.ndarray, int]] = {}

    def new_map(self, config, feature_dim: int) -> VoxelMap:
        b = self.backend
        shape = (b.params.num_layers, b.params.hidden_dim) if b.recurrent else None
        return VoxelMap(config, feature_dim, shape, b.n_classes)

    def prune(self, vmap: VoxelMap, now: float) -> int:
        keys, states, frames = vmap.prune_expired(now)
        if self.backend.recurrent and self.keep_pruned_state:
            for k, s, f in zip(map(tuple, keys.tolist()), states, frames.tolist()):
                self.parked[k] = (s, f)
        return len(keys)

    def update(self, vmap: VoxelMap, obs: CellObservations, rows: np.ndarray, prev: np.ndarray, frame: int):
        b = self.backend
        if len(rows) == 0:
            return
        if b.kind == BAYES:
            if obs.probs is None:
                raise ConfigurationError("the Bayesian backend needs per-cell class likelihoods")
            prior = np.where(vmap.prob_set[rows, None], vmap.prob[rows], 1.0 / b.n_classes)
            vmap.prob[rows] = bayes_update(prior, obs.probs)
            vmap.prob_set[rows] = True
            return
        state = vmap.state[rows]
        prev = prev.copy()
        if self.parked:
            for j in np.flatnonzero(prev < 0):
                hit = self.parked.pop(tuple(obs.keys[j].tolist()), None)
                if hit is not None:
                    state[j], prev[j] = hit
        keep = (prev >= 0) & nap_keep(np.where(prev >= 0, prev, frame - 1), frame, b.mntd)
        state[~keep] = 0.0
        new_state, prob = recurrent_update(b.params, state, obs.features)
        vmap.state[rows] = new_state
        vmap.prob[rows] = prob
        vmap.prob_set[rows] = True


def write_prob_history(path, rows: List[Tuple[Tuple[int, int, int], int, np.ndarray]]):
    """CSV of (cell key, frame, class probabilities, argmax) records."""
    n_classes = len(rows[0][2]) if rows else 4
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_ix", "cell_iy", "cell_iz", "frame"] + [f"prob_{c}" for c in range(n_classes)]
                   + ["argmax"])
        for key, frame, prob in rows:
            w.writerow(list(key) + [frame] + ["%.17g" % p for p in prob] + [int(np.argmax(prob))])
