"""Pipeline stages shared by the command line and the acceptance suite:
profiles, perception training with held-out scoring, fusion training on the
training days, and lockstep evaluation of the baselines and the MNTD sweep."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError
from .fusion import FusionBackend, parse_mntd
from .metrics import METRIC_NAMES
from .neural import Dense, LSTMParams
from .perception import (LabeledObject, PerceptionModel, PerceptionTrainConfig, extract_objects,
                         init_perception_model, make_shapes_corpus, object_accuracy, train_perception,
                         yaw_robustness)
from .perception.model import FULL_OBJECT_SIZES, FULL_POINT_SIZES
from .perception.training import PerceptionTrainResult
from .simulator import ScenarioConfig
from .trainer import (EvaluationResult, ObservationSource, TrainConfig, TrainResult, collect_training_data,
                      evaluate, train_fusion)

log = logging.getLogger(__name__)

SWEEP_MNTD = ("1", "10", "100", "200", "500", "1000", "day")
HELDOUT_SEED_OFFSET = 1000


@dataclass(frozen=True)
class Profile:
    name: str
    scenario: Dict = field(default_factory=dict)  # ScenarioConfig overrides
    perception_scans: int = 300
    heldout_scans: int = 100
    perception: PerceptionTrainConfig = PerceptionTrainConfig()
    fusion: TrainConfig = TrainConfig()


PROFILES = {
    "smoke": Profile("smoke", dict(days=2, train_days=1, frames_per_day=60), 30, 10,
                     PerceptionTrainConfig(epochs=2),
                     TrainConfig(batch_size=8, hidden_dim=8, epochs=2, batches_per_epoch=10, seq_cap=50,
                                 truncation=50)),
    "desk": Profile("desk"),
    "paper": Profile("paper", {}, 1000, 300,
                     PerceptionTrainConfig(point_sizes=FULL_POINT_SIZES, object_sizes=FULL_OBJECT_SIZES),
                     TrainConfig(hidden_dim=128, epochs=100)),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}") from None


def scenario_for(profile: Profile, overrides: Optional[Dict] = None, seed: Optional[int] = None) -> ScenarioConfig:
    """Built-in default < profile < config file < explicit seed."""
    d = dict(profile.scenario)
    d.update(overrides or {})
    if seed is not None:
        d["seed"] = seed
    return ScenarioConfig.from_dict(d)


# ---------------------------------------------------------------- perception


@dataclass
class PerceptionReport:
    heldout_accuracy: float
    yaw_robustness: float
    n_train_objects: int
    n_heldout_objects: int


def perception_corpora(profile: Profile, seed: int) -> Tuple[List[LabeledObject], List[LabeledObject]]:
    train = extract_objects(make_shapes_corpus(profile.perception_scans, seed))
    held = extract_objects(make_shapes_corpus(profile.heldout_scans, seed + HELDOUT_SEED_OFFSET))
    return train, held


def train_perception_stage(profile: Profile, seed: int, objects=None,
                           progress: Optional[Callable[[str], None]] = None
                           ) -> Tuple[PerceptionTrainResult, PerceptionReport]:
    train, held = perception_corpora(profile, seed) if objects is None else objects
    cfg = replace(profile.perception, seed=seed)
    res = train_perception(train, cfg)
    report = PerceptionReport(object_accuracy(res.model, held), yaw_robustness(res.model, held),
                              len(train), len(held))
    if progress:
        progress(f"perception: held-out accuracy {report.heldout_accuracy:.3f}, "
                 f"yaw robustness {report.yaw_robustness:.3f}")
    return res, report


def observation_digest(model: PerceptionModel) -> str:
    """Fingerprint of what noise-mode observations depend on (prototypes and decoder)."""
    h = hashlib.sha256()
    last = model.object_mlp.layers[-1]
    for a in (model.prototypes, last.weight, last.bias):
        if a is not None:
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def reference_observation_model(feature_dim: int = 32, seed: int = 0) -> PerceptionModel:
    """Untrained stand-in whose class prototypes are disjoint indicator blocks.

    Noise-mode observations only use the prototypes and the final decoder, so
    this lets the Bayesian baseline run without any trained weights.
    """
    model = init_perception_model(np.random.default_rng(seed), object_sizes=(64, feature_dim))
    n = model.n_classes
    width = feature_dim // n
    protos = np.zeros((n, feature_dim))
    for c in range(n):
        protos[c, c * width:(c + 1) * width] = 1.0
    model.object_mlp.layers[-1] = Dense(protos * 4.0, np.zeros(n), "identity")
    model.prototypes = protos
    return model


# ---------------------------------------------------------------- fusion


def build_backends(params: Optional[LSTMParams], backend: Optional[str] = None, mntd: str = "day",
                   compare: bool = False, sweep: bool = False,
                   sweep_values: Sequence[str] = SWEEP_MNTD, frame_rate: float = 10.0) -> Dict[str, FusionBackend]:
    """Named backends for one lockstep evaluation run."""
    out: Dict[str, FusionBackend] = {}

    def add(kind: str, m: str = "day"):
        if kind == "bayes":
            b = FusionBackend.bayes()
        elif params is None:
            raise ConfigurationError(f"backend {kind!r} needs fusion LSTM weights (--model)")
        elif kind == "lstm":
            b = FusionBackend.standard(params)
        elif kind == "naplstm":
            b = FusionBackend.nap(params, parse_mntd(m, frame_rate))
        else:
            raise ConfigurationError(f"unknown backend {kind!r}")
        out.setdefault(b.label(frame_rate), b)

    if compare:
        add("bayes")
        add("lstm")
        add("naplstm", mntd)
    if sweep:
        for m in sweep_values:
            add("naplstm", m)
    if backend is not None:
        add(backend, mntd)
    if not out:
        raise ConfigurationError("nothing to evaluate: give --backend, --compare or --sweep-mntd")
    return out


@dataclass
class ReproduceResult:
    scenario: ScenarioConfig
    perception: PerceptionTrainResult
    perception_report: PerceptionReport
    training: TrainResult
    evaluation: EvaluationResult
    n_sequences: int
    timings: Dict[str, float]


def reproduce(profile: Profile, seed: Optional[int] = None, scenario_overrides: Optional[Dict] = None,
              jobs: int = 1, progress: Optional[Callable[[str], None]] = None) -> ReproduceResult:
    """Whole experiment: perception, replay of the training days, fusion
    training, then one lockstep evaluation of the baselines and the sweep."""
    scenario = scenario_for(profile, scenario_overrides, seed)
    seed = scenario.seed
    timings = {}
    t0 = time.perf_counter()
    perc, report = train_perception_stage(profile, seed, progress=progress)
    timings["perception"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    source = ObservationSource(scenario, perc.model, jobs=jobs)
    data = collect_training_data(source, range(scenario.train_days), progress)
    timings["replay"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    train = train_fusion(data.sequences, replace(profile.fusion, seed=seed), progress=progress)
    timings["fusion"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    backends = build_backends(train.params, compare=True, sweep=True, frame_rate=scenario.frame_rate)
    ev = evaluate(source, backends, range(scenario.train_days, scenario.days), progress=progress)
    timings["evaluation"] = time.perf_counter() - t0
    return ReproduceResult(scenario, perc, report, train, ev, len(data.sequences), timings)


# ---------------------------------------------------------------- qualitative claims


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _fmt(scores: Dict[str, float]) -> str:
    return ", ".join(f"{m}={scores[m]:.4f}" for m in METRIC_NAMES)


def check_backend_ordering(means: Dict[str, Dict[str, float]], margin: float = 0.05) -> Check:
    nap, lstm, bayes = means["naplstm[day]"], means["lstm"], means["bayes"]
    order = all(nap[m] > lstm[m] > bayes[m] for m in METRIC_NAMES)
    gap = nap["mean_iou"] - bayes["mean_iou"]
    detail = (f"naplstm[day]: {_fmt(nap)}; lstm: {_fmt(lstm)}; bayes: {_fmt(bayes)}; "
              f"mIoU gap {100 * gap:.2f} points")
    return Check("backend ordering", order and gap >= margin, detail)


def check_sweep_shape(means: Dict[str, Dict[str, float]], rise: float = 0.03, band: float = 0.01) -> Check:
    rise_ok = means["naplstm[100]"]["mean_iou"] - means["naplstm[1]"]["mean_iou"] >= rise
    tail = [means[f"naplstm[{m}]"] for m in ("100", "200", "500", "1000", "day")]
    flat_ok = all(tail[j][m] >= tail[i][m] - band
                  for m in METRIC_NAMES for i in range(len(tail)) for j in range(i + 1, len(tail)))
    detail = "mIoU by MNTD: " + ", ".join(f"{m}={means[f'naplstm[{m}]']['mean_iou']:.4f}" for m in SWEEP_MNTD)
    return Check("MNTD sweep shape", rise_ok and flat_ok, detail)
