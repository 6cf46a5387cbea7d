"""Observation replay, per-cell training sequences, fusion-LSTM training with
truncated BPTT, and the evaluation protocols (backend comparison, MNTD sweep)."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, ConfigurationError, FormatError, NumericError, TrainingDivergedError
from .fusion import BAYES, FusionBackend, FusionEngine, nap_keep
from .metrics import ConfusionMatrix, MetricsRow, accumulate, mean_row
from .neural import (LSTMParams, OptimizerState, batch_nll, bptt_backward, init_lstm,
                     lstm_forward_sequence, optimizer_step, softmax)
from .neural.io import (KIND_OPTIMIZER, WeightBundle, lstm_from_bundle, read_bundle,
                        write_bundle)
from .perception.classes import N_CLASSES, SemanticClass
from .perception.clustering import ClusteringConfig, background_box, cluster_objectness
from .perception.model import PerceptionModel, perceive
from .perception.scan import PointCloudScan, read_scan
from .simulator import (ScenarioConfig, World, dropout_mask, frame_rng, generate_world,
                        ground_truth_from_masks, inject_observation_noise, prototype_features, render_scan,
                        scan_cell_labels)
from .voxel_map import CellObservations, GroundTruthMap, MapConfig, pool_by_cell

log = logging.getLogger(__name__)

NOISE_STREAM, DROPOUT_STREAM = 2, 3


def scan_path(root, day: int, k: int) -> Path:
    return Path(root) / f"day_{day:02d}" / f"scan_{k:06d}.txt"


@dataclass
class ObservationFrame:
    day: int
    k: int
    frame: int
    time: float
    obs: CellObservations
    gt_keys: np.ndarray  # cells hit this frame (before dropout), for ground truth
    gt_masks: np.ndarray  # label bitmask per gt key


class ObservationSource:
    """Turns scans into per-cell observations (f_cell and class likelihoods).

    In ``noise`` mode the points of each objectness box are grouped by true
    class; every group draws a corrupted class from the confusion matrix and
    carries that class's prototype feature. In ``perception`` mode the trained networks run
    on the scan. Either way cells then drop out independently per frame.
    """

    def __init__(self, config: ScenarioConfig, model: PerceptionModel, map_config: MapConfig = MapConfig(),
                 world: Optional[World] = None, scan_dir=None,
                 clustering: ClusteringConfig = ClusteringConfig(), jobs: int = 1):
        self.config = config
        self.jobs = max(1, int(jobs))
        self.model = model
        self.map_config = map_config
        self.world = world if world is not None else generate_world(config)
        self.scan_dir = None if scan_dir is None else Path(scan_dir)
        self.clustering = clustering
        if config.observation_mode == "noise" and model.prototypes is None:
            raise ConfigurationError("noise-mode observations need a perception model with class prototypes")
        last = model.object_mlp.layers[-1]
        self._w_last, self._b_last = last.weight, last.bias

    @property
    def feature_dim(self) -> int:
        return self.model.feature_dim

    def scan(self, day: int, k: int) -> PointCloudScan:
        if self.scan_dir is not None:
            return read_scan(scan_path(self.scan_dir, day, k))
        return render_scan(self.world, day, k)

    def frame(self, day: int, k: int) -> ObservationFrame:
        c = self.config
        scan = self.scan(day, k)
        g = c.global_frame(day, k)
        if scan.labels is None:
            raise ArgumentError(f"scan ({day}, {k}) has no point labels")
        pts_map = scan.pose.apply(scan.points)
        n = len(scan)
        if c.observation_mode == "perception":
            per = perceive(self.model, scan, self.clustering)
            pf, pp = per.point_features, per.point_probs
        else:
            boxes = cluster_objectness(scan, self.clustering)
            bg = background_box(n, scan.points, boxes)
            every = boxes + ([bg] if bg is not None else [])
            # one draw per (box, true class) group, so a box that swallowed
            # points of another class does not relabel them
            groups = []
            for b in every:
                lab = scan.labels[b.members]
                for cls in np.unique(lab):
                    groups.append((int(cls), b.members[lab == cls]))
            truth = np.array([cls for cls, _ in groups], dtype=np.int64)
            rng = frame_rng(c.seed, NOISE_STREAM, g)
            noisy = inject_observation_noise(truth, c.confusion, rng)
            feats = prototype_features(self.model.prototypes, noisy, c.feature_jitter, rng)
            probs = softmax(feats @ self._w_last.T + self._b_last)
            pf = np.zeros((n, self.feature_dim))
            pp = np.zeros((n, self.model.n_classes))
            for j, (_, members) in enumerate(groups):
                pf[members] = feats[j]
                pp[members] = probs[j]
        obs = pool_by_cell(pts_map, pf, self.map_config.resolution, pp)
        keep = dropout_mask(len(obs.keys), c.dropout, frame_rng(c.seed, DROPOUT_STREAM, g))
        obs = CellObservations(obs.keys[keep], obs.features[keep], obs.counts[keep], obs.probs[keep])
        gk, gm = scan_cell_labels(scan, self.map_config.resolution)
        return ObservationFrame(day, k, g, c.timestamp(day, k), obs, gk, gm)

    def day(self, day: int) -> Iterator[ObservationFrame]:
        """Frames of one day in order; with ``jobs > 1`` they are produced by a process pool."""
        ks = range(self.config.frames_per_day)
        if self.jobs <= 1:
            for k in ks:
                yield self.frame(day, k)
            return
        with ProcessPoolExecutor(self.jobs, initializer=_init_worker, initargs=(self,)) as pool:
            yield from pool.map(_worker_frame, [(day, k) for k in ks], chunksize=8)


_WORKER_SOURCE: Optional[ObservationSource] = None


def _init_worker(source: ObservationSource):
    global _WORKER_SOURCE
    _WORKER_SOURCE = source


def _worker_frame(args) -> ObservationFrame:
    return _WORKER_SOURCE.frame(*args)


# ---------------------------------------------------------------- sequences


@dataclass
class CellSequence:
    key: Tuple[int, int, int]
    frames: np.ndarray  # (T,) strictly increasing
    features: np.ndarray  # (T, D)
    labels: np.ndarray  # (T,) class per step, -1 where unlabeled (DontCare / not in ground truth)

    def __len__(self):
        return len(self.frames)


def build_sequences(frames: np.ndarray, keys: np.ndarray, features: np.ndarray, day_of: np.ndarray,
                    gt_by_day: Dict[int, GroundTruthMap]) -> List[CellSequence]:
    """Group per-frame cell observations into one time-ordered sequence per cell.

    ``frames``/``keys``/``features``/``day_of`` are flat arrays with one entry
    per (frame, cell) observation. Labels come from that day's ground truth;
    cells with no labeled step are dropped.
    """
    frames = np.asarray(frames, dtype=np.int64)
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if not (len(frames) == len(keys) == len(features) == len(day_of)):
        raise ArgumentError("observation arrays must have equal length")
    if len(frames) == 0:
        return []
    labels = np.full(len(frames), -1, np.int64)
    for day, gt in gt_by_day.items():
        sel = np.flatnonzero(day_of == day)
        if len(sel) == 0:
            continue
        lookup = gt.as_dict()
        lab = np.array([lookup.get(k, -1) for k in map(tuple, keys[sel].tolist())], dtype=np.int64)
        lab[lab == SemanticClass.DONT_CARE] = -1
        labels[sel] = lab
    order = np.lexsort((frames, keys[:, 2], keys[:, 1], keys[:, 0]))
    k_sorted = keys[order]
    f_sorted = frames[order]
    new_cell = np.concatenate([[True], np.any(np.diff(k_sorted, axis=0) != 0, axis=1)])
    if (~new_cell[1:] & (np.diff(f_sorted) == 0)).any():
        raise ArgumentError("a cell was observed twice in the same frame")
    starts = np.flatnonzero(new_cell)
    ends = np.concatenate([starts[1:], [len(order)]])
    feats_sorted = features[order]
    lab_sorted = labels[order]
    out = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        lab = lab_sorted[s:e]
        if (lab >= 0).any():
            out.append(CellSequence(tuple(int(v) for v in k_sorted[s]), f_sorted[s:e], feats_sorted[s:e], lab))
    return out


@dataclass
class TrainingData:
    sequences: List[CellSequence]
    ground_truth: Dict[int, GroundTruthMap]


def collect_training_data(source: ObservationSource, days: Sequence[int],
                          progress: Optional[Callable[[str], None]] = None) -> TrainingData:
    """Replay training days once; build ground truth and cell sequences."""
    frames, keys, feats, day_of = [], [], [], []
    gts = {}
    for d in days:
        masks = []
        for fr in source.day(d):
            masks.append((fr.gt_keys, fr.gt_masks))
            m = len(fr.obs.keys)
            frames.append(np.full(m, fr.frame, np.int64))
            keys.append(fr.obs.keys)
            feats.append(fr.obs.features.astype(np.float32))
            day_of.append(np.full(m, d, np.int64))
        gts[d] = ground_truth_from_masks(masks, source.map_config.resolution, d)
        if progress:
            progress(f"training day {d} replayed")
    seqs = build_sequences(np.concatenate(frames), np.concatenate(keys), np.concatenate(feats),
                           np.concatenate(day_of), gts)
    return TrainingData(seqs, gts)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    batch_size: int = 32
    hidden_dim: int = 32
    num_layers: int = 2
    epochs: int = 30
    batches_per_epoch: int = 60
    lr: float = 0.001
    decay: float = 0.95
    optimizer: str = "adam"
    clip_norm: Optional[float] = 5.0
    truncation: int = 200
    seq_cap: int = 200
    loss_placement: str = "every"  # "every" | "final"
    class_weights: bool = True
    seed: int = 0

    def __post_init__(self):
        for f in ("batch_size", "hidden_dim", "num_layers", "epochs", "batches_per_epoch", "truncation",
                  "seq_cap"):
            if int(getattr(self, f)) < 1:
                raise ConfigurationError(f"train config field {f!r} must be positive")
        if self.lr <= 0 or self.decay <= 0:
            raise ConfigurationError("train config fields 'lr' and 'decay' must be positive")
        if self.loss_placement not in ("every", "final"):
            raise ConfigurationError("train config field 'loss_placement' must be 'every' or 'final'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown train config field(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class Segment:
    seq: int
    start: int
    stop: int


def sample_batch(sequences: Sequence[CellSequence], batch_size: int, cap: int, rng: np.random.Generator,
                 from_start: bool = False) -> List[Segment]:
    """Uniform (sequence, start) pairs; each segment runs ``cap`` steps or to the end."""
    if not sequences:
        raise ArgumentError("cannot sample from an empty sequence list")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if from_start:
        picks = rng.integers(len(sequences), size=batch_size)
        starts = np.zeros(batch_size, np.int64)
    else:
        cum = np.concatenate([[0], np.cumsum(lengths)])
        flat = rng.integers(cum[-1], size=batch_size)
        picks = np.searchsorted(cum, flat, side="right") - 1
        starts = flat - cum[picks]
    return [Segment(int(q), int(s), int(min(s + cap, lengths[q]))) for q, s in zip(picks, starts)]


def batch_arrays(sequences: Sequence[CellSequence], segments: Sequence[Segment], mntd: float = math.inf,
                 placement: str = "every"):
    """Time-major padded arrays (xs, labels, resets) for a list of segments.

    Padded steps carry label -1 and sit after each segment's end, so they
    never influence a counted loss.
    """
    T = max(s.stop - s.start for s in segments)
    B = len(segments)
    D = sequences[segments[0].seq].features.shape[1]
    xs = np.zeros((T, B, D))
    labels = np.full((T, B), -1, np.int64)
    resets = np.zeros((T, B), bool)
    for b, sg in enumerate(segments):
        seq = sequences[sg.seq]
        n = sg.stop - sg.start
        xs[:n, b] = seq.features[sg.start:sg.stop]
        lab = seq.labels[sg.start:sg.stop]
        if placement == "final":
            last = np.flatnonzero(lab >= 0)
            only = np.full(n, -1, np.int64)
            if len(last):
                only[last[-1]] = lab[last[-1]]
            lab = only
        labels[:n, b] = lab
        if n > 1 and not math.isinf(mntd):
            fr = seq.frames[sg.start:sg.stop]
            resets[1:n, b] = ~nap_keep(fr[:-1], fr[1:], mntd)
    return xs, labels, resets


def inverse_frequency_weights(sequences: Sequence[CellSequence], n_classes: int = N_CLASSES) -> np.ndarray:
    counts = np.zeros(n_classes)
    for s in sequences:
        lab = s.labels[s.labels >= 0]
        counts += np.bincount(lab, minlength=n_classes)[:n_classes]
    w = np.where(counts > 0, counts.sum() / (n_classes * np.maximum(counts, 1)), 0.0)
    return w


@dataclass
class TrainResult:
    params: LSTMParams
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    opt: Optional[OptimizerState] = None
    rng_state: Optional[dict] = None


def batch_loss_and_grads(params: LSTMParams, xs, labels, resets, weights, truncation: int):
    cache = lstm_forward_sequence(params, xs, resets)
    T, B, C = cache.probs.shape
    loss, dlogits, wsum = batch_nll(cache.probs.reshape(T * B, C), labels.reshape(T * B), weights)
    grads = bptt_backward(params, cache, dlogits.reshape(T, B, C), truncation)
    return loss, grads, wsum


def train_fusion(sequences: Sequence[CellSequence], config: TrainConfig = TrainConfig(),
                 input_dim: Optional[int] = None, resume: Optional[TrainResult] = None,
                 checkpoint: Optional[Path] = None,
                 progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train the shared fusion LSTM with MNTD = infinity (no resets across gaps).

    Seed-deterministic. With ``resume`` training continues from a saved
    state (params, optimizer moments, sampler RNG), so an interrupted run
    reproduces the uninterrupted loss curve.
    """
    if not sequences:
        raise ArgumentError("no training sequences")
    D = sequences[0].features.shape[1] if input_dim is None else input_dim
    if resume is None:
        rng = np.random.default_rng(config.seed)
        params = init_lstm(D, config.hidden_dim, config.num_layers, N_CLASSES, rng)
        opt = OptimizerState(base_lr=config.lr, decay=config.decay, kind=config.optimizer,
                             clip_norm=config.clip_norm)
        result = TrainResult(params, [], [], opt)
    else:
        result = resume
        params, opt = resume.params, resume.opt
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    weights = inverse_frequency_weights(sequences) if config.class_weights else None
    for epoch in range(len(result.losses), config.epochs):
        total, wtotal = 0.0, 0.0
        for bi in range(config.batches_per_epoch):
            segs = sample_batch(sequences, config.batch_size, config.seq_cap, rng)
            xs, labels, resets = batch_arrays(sequences, segs, math.inf, config.loss_placement)
            try:
                loss, grads, wsum = batch_loss_and_grads(params, xs, labels, resets, weights, config.truncation)
                bad = None if math.isfinite(loss) and all(np.isfinite(g).all() for g in grads.tensors()) \
                    else f"non-finite loss {loss}"
            except NumericError as exc:
                bad = str(exc)
            if bad is not None:
                raise TrainingDivergedError(f"{bad} at epoch {epoch + 1}, batch {bi + 1}; "
                                            + _suspect(sequences, segs))
            optimizer_step(opt, params, grads)
            total += loss * wsum
            wtotal += wsum
        mean = total / max(wtotal, 1e-300)
        result.losses.append(mean)
        result.lrs.append(opt.lr)
        opt.end_epoch()
        result.rng_state = rng.bit_generator.state
        if progress:
            progress(f"fusion epoch {epoch + 1}/{config.epochs} loss {mean:.4f} lr {result.lrs[-1]:.6f}")
        if checkpoint is not None:
            save_checkpoint(checkpoint, result, config)
    result.rng_state = rng.bit_generator.state
    return result


def _suspect(sequences: Sequence[CellSequence], segs: Sequence[Segment]) -> str:
    """Name the batch segment most likely to blame: non-finite input first, then largest magnitude."""
    def score(sg):
        x = sequences[sg.seq].features[sg.start:sg.stop]
        return (not np.isfinite(x).all(), float(np.nan_to_num(np.abs(x)).max()))
    worst = max(segs, key=score)
    return f"sequence {worst.seq} (cell {sequences[worst.seq].key}, steps {worst.start}:{worst.stop})"


def save_checkpoint(path, result: TrainResult, config: TrainConfig):
    opt = result.opt
    meta = {"train_config": asdict(config), "losses": result.losses, "lrs": result.lrs,
            "rng_state": result.rng_state,
            "optimizer": {k: v for k, v in asdict(opt).items() if k != "accumulators"},
            "lstm_dims": [result.params.input_dim, result.params.hidden_dim, result.params.num_layers],
            "n_lstm_tensors": len(result.params.tensors())}
    tensors = result.params.tensors() + list(opt.accumulators)
    write_bundle(path, WeightBundle(KIND_OPTIMIZER, result.params.num_classes, meta["lstm_dims"], tensors, meta))


def load_checkpoint(path) -> Tuple[TrainResult, TrainConfig]:
    b = read_bundle(path)
    if b.kind != KIND_OPTIMIZER:
        raise FormatError(f"{path} is not a training checkpoint")
    n = b.meta["n_lstm_tensors"]
    lstm = lstm_from_bundle(WeightBundle(1, b.n_classes, b.dims, b.tensors[:n], {}))
    o = dict(b.meta["optimizer"])
    opt = OptimizerState(**o)
    opt.accumulators = [t.copy() for t in b.tensors[n:]]
    result = TrainResult(lstm, list(b.meta["losses"]), list(b.meta["lrs"]), opt, b.meta["rng_state"])
    return result, TrainConfig.from_dict(b.meta["train_config"])


# ---------------------------------------------------------------- evaluation


@dataclass
class EvaluationResult:
    rows: List[MetricsRow]  # per day and backend, followed by one mean row per backend
    ground_truth: Dict[int, GroundTruthMap]
    means: Dict[str, Dict[str, float]]  # backend name -> mean-over-days scores


def evaluate(source: ObservationSource, backends: Dict[str, FusionBackend], days: Sequence[int],
             keep_pruned_state: bool = True, snapshot_dir: Optional[Path] = None,
             progress: Optional[Callable[[str], None]] = None) -> EvaluationResult:
    """Replay ``days`` once, feeding every backend the same observations in lockstep.

    Each day's prediction is the class distribution every cell held after
    its last observation that day; it is scored against that day's ground
    truth. Maps persist across days; the retention rule clears them between
    days, and recurrent backends may carry parked state subject to MNTD.
    """
    if not backends:
        raise ArgumentError("no backends to evaluate")
    mc = source.map_config
    engines = {name: FusionEngine(b, keep_pruned_state) for name, b in backends.items()}
    maps = {name: e.new_map(mc, source.feature_dim) for name, e in engines.items()}
    per_day: Dict[str, List[MetricsRow]] = {name: [] for name in backends}
    gts = {}
    for d in days:
        masks = []
        day_start = source.config.timestamp(d, 0)
        for fr in source.day(d):
            masks.append((fr.gt_keys, fr.gt_masks))
            for name, eng in engines.items():
                vmap = maps[name]
                eng.prune(vmap, fr.time)
                rows, prev = vmap.observe(fr.obs, fr.time, fr.frame)
                eng.update(vmap, fr.obs, rows, prev, fr.frame)
        gt = ground_truth_from_masks(masks, mc.resolution, d)
        gts[d] = gt
        for name, vmap in maps.items():
            n = len(vmap)
            today = np.flatnonzero((vmap.last_time[:n] >= day_start) & vmap.prob_set[:n])
            cm = accumulate(ConfusionMatrix(N_CLASSES), vmap.keys[today], vmap.prob[today], gt, mc.resolution)
            b = backends[name]
            per_day[name].append(MetricsRow(d, b.kind, _mntd_label(b, source.config.frame_rate), cm, cm.scores()))
            if snapshot_dir is not None:
                safe = name.replace("[", "_mntd").replace("]", "")
                vmap.snapshot(Path(snapshot_dir) / f"{safe}_day{d:02d}.map")
        if progress:
            progress(f"evaluated day {d}: " + ", ".join(
                f"{n}={per_day[n][-1].scores['mean_iou']:.3f}" for n in backends))
    rows, means = [], {}
    for name in backends:
        rows.extend(per_day[name])
    for name, b in backends.items():
        m = mean_row(per_day[name], b.kind, _mntd_label(b, source.config.frame_rate))
        rows.append(m)
        means[name] = m.scores
    return EvaluationResult(rows, gts, means)


def _mntd_label(b: FusionBackend, frame_rate: float) -> str:
    from .fusion import format_mntd
    if b.kind == BAYES:
        return "-"
    return format_mntd(b.mntd, frame_rate)
