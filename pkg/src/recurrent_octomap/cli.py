"""Command-line entry point: ``recurrent-octomap <command> [options]``.

Commands: simulate, train-perception, train-fusion, evaluate, reproduce.
Settings resolve as flag > config file > profile default, and every run
writes one ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .errors import (ArgumentError, ConfigurationError, DataPathError, FormatError, NumericError,
                     OutputExistsError, UndefinedMetricError)
from .fusion import BACKENDS
from .metrics import METRIC_NAMES, MetricsRow, write_metrics_csv, write_metrics_json
from .neural.io import KIND_LSTM, KIND_MLP_GROUP, lstm_from_bundle, read_bundle, save_lstm
from .perception import (PerceptionModel, extract_objects, load_perception, read_corpus, save_perception)
from .perception.scan import read_scan, write_scan
from .pipeline import (SWEEP_MNTD, Profile, build_backends, check_backend_ordering, check_sweep_shape,
                       get_profile, observation_digest, perception_corpora, reference_observation_model,
                       reproduce, scenario_for, train_perception_stage)
from .simulator import ScenarioConfig, build_ground_truth, generate_world, render_scan
from .trainer import (ObservationSource, TrainConfig, collect_training_data, evaluate, load_checkpoint,
                      scan_path, train_fusion)

log = logging.getLogger("recurrent_octomap")

THREADS_ENV = "RECURRENT_OCTOMAP_THREADS"
EXIT_CODES = {
    "ok": 0,
    "unexpected": 1,
    "configuration": 2,  # ConfigurationError, ArgumentError, bad flags
    "missing_data": 3,  # DataPathError
    "format": 4,  # FormatError
    "numeric": 5,  # NumericError, TrainingDivergedError, UndefinedMetricError
    "exists": 6,  # OutputExistsError
}
PERCEPTION_FILE = "perception.weights"
FUSION_FILE = "fusion.weights"
CHECKPOINT_FILE = "fusion_checkpoint.weights"
MANIFEST_FILE = "manifest.json"
SCENARIO_FILE = "scenario.json"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, OutputExistsError):
        return EXIT_CODES["exists"]
    if isinstance(exc, DataPathError):
        return EXIT_CODES["missing_data"]
    if isinstance(exc, FormatError):
        return EXIT_CODES["format"]
    if isinstance(exc, (NumericError, UndefinedMetricError)):
        return EXIT_CODES["numeric"]
    if isinstance(exc, (ConfigurationError, ArgumentError)):
        return EXIT_CODES["configuration"]
    return EXIT_CODES["unexpected"]


# ---------------------------------------------------------------- run plumbing


class Run:
    """Output directory guard plus the manifest written at the end."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.out = Path(args.out)
        self.t0 = time.perf_counter()
        self.outputs: List[Path] = []
        self.config_paths: Dict[str, str] = {}
        self.effective: Dict = {}
        if self.out.exists() and any(self.out.iterdir()):
            if not args.force:
                raise OutputExistsError(f"{self.out} is not empty; pass --force to replace its contents")
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def finish(self, seed: Optional[int], extra: Optional[Dict] = None) -> Path:
        for p in self.outputs:
            if not p.exists() or p.stat().st_size == 0:
                raise FormatError(f"output {p} was not written")
        doc = {
            "command": self.command,
            "argv": sys.argv[1:],
            "config_paths": self.config_paths,
            "seed": seed,
            "effective_config": self.effective,
            "outputs": {str(p.relative_to(self.out)): _sha256(p) for p in self.outputs},
            "version": __version__,
            "duration_s": round(time.perf_counter() - self.t0, 3),
        }
        if extra:
            doc.update(extra)
        mpath = self.out / MANIFEST_FILE
        mpath.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")
        return mpath


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, (tuple, np.ndarray)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _progress(msg: str):
    log.info(msg)


def effective_jobs(args) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            jobs = int(env)
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    else:
        jobs = args.jobs
    if jobs < 1:
        raise ConfigurationError("--jobs must be at least 1")
    return jobs


def _read_json(path, what: str) -> Dict:
    path = Path(path)
    if not path.exists():
        raise DataPathError(f"{what} {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{what} {path} must hold a JSON object")
    return doc


def resolve_scenario(args, profile: Profile, run: Optional[Run] = None) -> ScenarioConfig:
    """Profile default < --scenario file (or the data directory's copy) < --seed/--days flags."""
    overrides: Dict = {}
    data = getattr(args, "data", None)
    source = None
    if args.scenario:
        source = Path(args.scenario)
    elif data and (Path(data) / SCENARIO_FILE).exists():
        source = Path(data) / SCENARIO_FILE
    if source is not None:
        overrides.update(_read_json(source, "scenario file"))
        if run is not None:
            run.config_paths["scenario"] = str(source)
    _apply_days(args, profile, overrides)
    return scenario_for(profile, overrides, args.seed)


def _apply_days(args, profile: Profile, overrides: Dict):
    """--days keeps at least one test day whenever there are two or more days."""
    if args.days is not None:
        overrides["days"] = args.days
        tdays = overrides.get("train_days", profile.scenario.get("train_days", ScenarioConfig.train_days))
        overrides["train_days"] = max(0, min(tdays, args.days - 1))


def resolve_train_config(args, profile: Profile, run: Optional[Run] = None) -> TrainConfig:
    d = asdict(profile.fusion)
    if args.train_config:
        d.update(_read_json(args.train_config, "train config file"))
        if run is not None:
            run.config_paths["train_config"] = str(args.train_config)
    for flag in ("epochs", "hidden_dim"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _check_data_dir(data) -> Path:
    data = Path(data)
    if not data.is_dir():
        raise DataPathError(f"data directory {data} does not exist; create it with "
                            f"'recurrent-octomap simulate --out {data}' or drop --data to render scans on the fly")
    return data


def load_models(paths) -> Tuple[Optional[PerceptionModel], Optional[object], Dict]:
    """Sort --model files into the perception model and the fusion LSTM by their header."""
    perception, lstm, lstm_meta = None, None, {}
    for p in paths or []:
        b = read_bundle(p)
        if b.kind == KIND_MLP_GROUP:
            if perception is not None:
                raise ConfigurationError("more than one perception model given with --model")
            perception = load_perception(p)
        elif b.kind == KIND_LSTM:
            if lstm is not None:
                raise ConfigurationError("more than one fusion LSTM given with --model")
            lstm, lstm_meta = lstm_from_bundle(b), b.meta
        else:
            raise ConfigurationError(f"{p} holds neither a perception model nor a fusion LSTM")
    return perception, lstm, lstm_meta


def _observation_model(perception: Optional[PerceptionModel], scenario: ScenarioConfig) -> PerceptionModel:
    if perception is not None:
        return perception
    if scenario.observation_mode == "perception":
        raise ConfigurationError("observation_mode 'perception' needs a perception model (--model)")
    return reference_observation_model()


# ---------------------------------------------------------------- simulate


def _simulate_day(args):
    config_json, out, day, resolution = args
    config = ScenarioConfig.from_json(config_json)
    world = generate_world(config)
    scans = []
    for k in range(config.frames_per_day):
        scan = render_scan(world, day, k)
        write_scan(scan_path(out, day, k), scan)
        scans.append(scan)
    gt = build_ground_truth(world, day, resolution, scans)
    gt.save(Path(out) / "gt" / f"day_{day:02d}.map")
    return day


def cmd_simulate(args) -> int:
    profile = get_profile(args.profile)
    run = Run(args, "simulate")
    if args.force:
        for old in list(run.out.glob("day_*")) + [run.out / "gt"]:
            if old.is_dir():
                shutil.rmtree(old)
    scenario = resolve_scenario(args, profile, run)
    run.effective = {"scenario": asdict(scenario), "resolution": args.resolution, "jobs": effective_jobs(args)}
    scenario.save(run.path(SCENARIO_FILE))
    (run.out / "gt").mkdir(exist_ok=True)
    for d in range(scenario.days):
        (run.out / f"day_{d:02d}").mkdir(exist_ok=True)
    tasks = [(scenario.to_json(), str(run.out), d, args.resolution) for d in range(scenario.days)]
    jobs = effective_jobs(args)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            for d in pool.map(_simulate_day, tasks):
                _progress(f"simulated day {d}")
    else:
        for t in tasks:
            _progress(f"simulated day {_simulate_day(t)}")
    for d in range(scenario.days):
        for k in range(scenario.frames_per_day):
            run.outputs.append(scan_path(run.out, d, k))
        run.outputs.append(run.out / "gt" / f"day_{d:02d}.map")
    run.finish(scenario.seed)
    return 0


# ---------------------------------------------------------------- perception


def _perception_objects(args, profile: Profile, seed: int):
    """Training objects from --data (a scan corpus or a simulate output) or the built-in shapes corpus."""
    if not args.data:
        train, held = perception_corpora(profile, seed)
        return train, held, "synthetic shapes"
    data = _check_data_dir(args.data)
    _, held = perception_corpora(replace(profile, perception_scans=0), seed)
    if (data / SCENARIO_FILE).exists():
        scenario = ScenarioConfig.load(data / SCENARIO_FILE)
        step = max(1, scenario.frames_per_day // 50)
        scans = [read_scan(scan_path(data, d, k))
                 for d in range(scenario.train_days) for k in range(0, scenario.frames_per_day, step)]
    else:
        scans = read_corpus(data)
    objects = extract_objects(scans)
    if not objects:
        raise ArgumentError(f"no labeled objects found in {data}")
    return objects, held, str(data)


def cmd_train_perception(args) -> int:
    profile = get_profile(args.profile)
    run = Run(args, "train-perception")
    seed = 0 if args.seed is None else args.seed
    cfg = profile.perception
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    profile = replace(profile, perception=cfg)
    train, held, origin = _perception_objects(args, profile, seed)
    res, report = train_perception_stage(profile, seed, (train, held), progress=_progress)
    run.effective = {"profile": profile.name, "perception": asdict(replace(cfg, seed=seed)), "data": origin}
    save_perception(run.path(PERCEPTION_FILE), res.model,
                    {"observation_digest": observation_digest(res.model), "report": asdict(report)})
    _write_loss_csv(run.path("perception_loss.csv"), res.losses, res.lrs)
    run.path("perception_report.json").write_text(json.dumps(asdict(report), indent=1) + "\n")
    run.finish(seed, {"report": asdict(report)})
    return 0


def _write_loss_csv(path, losses, lrs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for i, (loss, lr) in enumerate(zip(losses, lrs)):
            w.writerow([i + 1, repr(float(loss)), repr(float(lr))])


# ---------------------------------------------------------------- fusion


def _source(args, scenario: ScenarioConfig, model: PerceptionModel) -> ObservationSource:
    scan_dir = _check_data_dir(args.data) if args.data else None
    return ObservationSource(scenario, model, scan_dir=scan_dir, jobs=effective_jobs(args))


def cmd_train_fusion(args) -> int:
    profile = get_profile(args.profile)
    run = Run(args, "train-fusion")
    scenario = resolve_scenario(args, profile, run)
    perception, lstm, _ = load_models(args.model)
    if lstm is not None:
        raise ConfigurationError("train-fusion takes a perception model with --model, not a fusion LSTM; "
                                 "use --resume to continue from a checkpoint")
    model = _observation_model(perception, scenario)
    config = resolve_train_config(args, profile, run)
    resume = None
    if args.resume:
        resume, saved = load_checkpoint(args.resume)
        run.config_paths["resume"] = str(args.resume)
        if replace(saved, epochs=config.epochs) != config:
            raise ConfigurationError("checkpoint was written with a different train config; "
                                     "only the epoch count may change on resume")
    run.effective = {"scenario": asdict(scenario), "train": asdict(config), "jobs": effective_jobs(args),
                     "observation_model": "reference" if perception is None else "given"}
    source = _source(args, scenario, model)
    data = collect_training_data(source, range(scenario.train_days), _progress)
    result = train_fusion(data.sequences, config, input_dim=model.feature_dim, resume=resume,
                          checkpoint=run.path(CHECKPOINT_FILE), progress=_progress)
    save_lstm(run.path(FUSION_FILE), result.params,
              {"train_config": asdict(config), "observation_digest": observation_digest(model),
               "feature_dim": model.feature_dim})
    _write_loss_csv(run.path("fusion_loss.csv"), result.losses, result.lrs)
    run.finish(config.seed, {"sequences": len(data.sequences)})
    return 0


# ---------------------------------------------------------------- evaluate


def write_table(path, means: Dict[str, Dict[str, float]], rows: List[MetricsRow], names: List[str]):
    """One line per backend and metric: the per-day scores followed by the mean."""
    days = sorted({r.day for r in rows if r.day != "mean"})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "backend"] + [f"day{d + 1}" for d in days] + ["mean"])
        for metric in METRIC_NAMES:
            for name in names:
                per_day = [r for r in rows if r.day != "mean" and _row_name(r) == name]
                w.writerow([metric, name] + ["%.4f" % r.scores[metric] for r in per_day]
                           + ["%.4f" % means[name][metric]])


def _row_name(r: MetricsRow) -> str:
    return r.backend if r.backend != "naplstm" else f"naplstm[{r.mntd}]"


def cmd_evaluate(args) -> int:
    profile = get_profile(args.profile)
    run = Run(args, "evaluate")
    scenario = resolve_scenario(args, profile, run)
    perception, lstm, lstm_meta = load_models(args.model)
    model = _observation_model(perception, scenario)
    if args.mntd is not None and args.backend != "naplstm" and not (args.compare or args.sweep_mntd):
        raise ConfigurationError(f"--mntd only applies to the naplstm backend, not {args.backend!r}")
    needs_lstm = args.compare or args.sweep_mntd or args.backend in ("lstm", "naplstm")
    if needs_lstm and lstm is None:
        raise ConfigurationError("backends lstm and naplstm need fusion weights: pass the file written by "
                                 "train-fusion with --model")
    if lstm is not None and needs_lstm:
        if lstm.input_dim != model.feature_dim:
            raise ConfigurationError(f"fusion LSTM expects {lstm.input_dim}-dim cell features but the "
                                     f"observation model produces {model.feature_dim}")
        want = lstm_meta.get("observation_digest")
        if want is not None and want != observation_digest(model):
            raise ConfigurationError("fusion LSTM was trained on a different observation model; pass the "
                                     "perception model it was trained with")
    backends = build_backends(lstm, args.backend, args.mntd or "day", args.compare, args.sweep_mntd,
                              frame_rate=scenario.frame_rate)
    run.effective = {"scenario": asdict(scenario), "backends": list(backends), "jobs": effective_jobs(args),
                     "observation_model": "reference" if perception is None else "given"}
    for p in args.model or []:
        run.config_paths.setdefault("models", []).append(str(p))
    days = range(scenario.train_days, scenario.days)
    if len(days) == 0:
        raise ConfigurationError("scenario has no test days (train_days == days)")
    snap_dir = run.out / "snapshots" if args.snapshots else None
    if snap_dir is not None:
        snap_dir.mkdir(exist_ok=True)
    source = _source(args, scenario, model)
    ev = evaluate(source, backends, days, snapshot_dir=snap_dir, progress=_progress)
    write_metrics_csv(run.path("metrics.csv"), ev.rows)
    write_metrics_json(run.path("metrics.json"), ev.rows)
    if args.compare or args.sweep_mntd:
        write_table(run.path("table.csv"), ev.means, ev.rows, list(backends))
    if snap_dir is not None:
        run.outputs.extend(sorted(snap_dir.iterdir()))
    run.finish(scenario.seed, {"means": ev.means})
    return 0


# ---------------------------------------------------------------- reproduce


def cmd_reproduce(args) -> int:
    profile = get_profile(args.profile)
    run = Run(args, "reproduce")
    overrides = _read_json(args.scenario, "scenario file") if args.scenario else {}
    if args.scenario:
        run.config_paths["scenario"] = str(args.scenario)
    _apply_days(args, profile, overrides)
    res = reproduce(profile, args.seed, overrides, jobs=effective_jobs(args), progress=_progress)
    run.effective = {"profile": profile.name, "scenario": asdict(res.scenario),
                     "perception": asdict(profile.perception), "train": asdict(profile.fusion)}
    model = res.perception.model
    save_perception(run.path(PERCEPTION_FILE), model, {"observation_digest": observation_digest(model)})
    save_lstm(run.path(FUSION_FILE), res.training.params,
              {"train_config": asdict(replace(profile.fusion, seed=res.scenario.seed)),
               "observation_digest": observation_digest(model), "feature_dim": model.feature_dim})
    _write_loss_csv(run.path("fusion_loss.csv"), res.training.losses, res.training.lrs)
    ev = res.evaluation
    write_metrics_csv(run.path("metrics.csv"), ev.rows)
    write_metrics_json(run.path("metrics.json"), ev.rows)
    write_table(run.path("table.csv"), ev.means, ev.rows, ["bayes", "lstm", "naplstm[day]"])
    write_table(run.path("sweep.csv"), ev.means, ev.rows, [f"naplstm[{m}]" for m in SWEEP_MNTD])
    checks = [check_backend_ordering(ev.means), check_sweep_shape(ev.means)]
    summary = {"perception": asdict(res.perception_report), "timings_s": res.timings,
               "checks": [asdict(c) for c in checks], "sequences": res.n_sequences}
    run.path("summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    run.finish(res.scenario.seed, {"checks": summary["checks"]})
    return 0


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory (must be empty unless --force)")
    common.add_argument("--scenario", help="scenario JSON file; fields override the profile defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides the scenario file)")
    common.add_argument("--days", type=int, help="number of simulated days (overrides the scenario file)")
    common.add_argument("--jobs", type=int, default=1, help=f"worker processes; {THREADS_ENV} overrides")
    common.add_argument("--profile", choices=["smoke", "desk", "paper"], default="desk")
    common.add_argument("--force", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="recurrent-octomap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="render a scenario to scan files and ground truth")
    p.add_argument("--resolution", type=float, default=0.4, help="ground-truth voxel size in metres")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-perception", parents=[common], help="train the point and object networks")
    p.add_argument("--data", help="scan corpus or simulate output; default is the synthetic shapes corpus")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_perception)

    p = sub.add_parser("train-fusion", parents=[common], help="train the fusion LSTM on the training days")
    p.add_argument("--data", help="simulate output directory; default renders scans on the fly")
    p.add_argument("--model", action="append", help="perception weights (default: reference prototypes)")
    p.add_argument("--train-config", help="JSON file of training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("evaluate", parents=[common], help="score fusion backends on the test days")
    p.add_argument("--data", help="simulate output directory; default renders scans on the fly")
    p.add_argument("--model", action="append", help="perception and/or fusion weights (repeatable)")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--mntd", help="frames, 'day' or 'inf' (naplstm only; default day)")
    p.add_argument("--compare", action="store_true", help="bayes, lstm and naplstm on identical inputs")
    p.add_argument("--sweep-mntd", action="store_true", help="naplstm at MNTD " + ", ".join(SWEEP_MNTD))
    p.add_argument("--snapshots", action="store_true", help="write each backend's map after every day")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", parents=[common], help="whole experiment with the ordering checks")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CODES["configuration"] if exc.code else EXIT_CODES["ok"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a documented exit code
        code = exit_code_for(exc)
        if code == EXIT_CODES["unexpected"]:
            log.exception("unexpected failure")
        print(f"recurrent-octomap {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
