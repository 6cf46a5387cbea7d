import csv
import json
import time

import pytest

from recurrent_octomap import cli
from recurrent_octomap.errors import (ConfigurationError, DataPathError, FormatError, OutputExistsError,
                                      TrainingDivergedError, UndefinedMetricError)
from recurrent_octomap.voxel_map import GroundTruthMap

TINY = {"frames_per_day": 8, "days": 3, "train_days": 2}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != cli.MANIFEST_FILE}


def _manifest(root):
    return json.loads((root / cli.MANIFEST_FILE).read_text())


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Simulated data, a one-epoch perception model and a smoke fusion model."""
    root = tmp_path_factory.mktemp("cli")
    sc = _write(root / "scenario.json", TINY)
    assert cli.main(["simulate", "--out", str(root / "sim"), "--scenario", sc]) == 0
    assert cli.main(["train-perception", "--out", str(root / "perc"), "--profile", "smoke"]) == 0
    assert cli.main(["train-fusion", "--out", str(root / "fus"), "--data", str(root / "sim"), "--profile", "smoke",
                     "--model", str(root / "perc" / cli.PERCEPTION_FILE)]) == 0
    return root


def test_simulate_writes_days_ground_truth_and_manifest(workspace):
    sim = workspace / "sim"
    assert sorted(p.name for p in sim.glob("day_*")) == ["day_00", "day_01", "day_02"]
    assert len(list((sim / "day_01").glob("scan_*.txt"))) == TINY["frames_per_day"]
    assert sorted(p.name for p in (sim / "gt").iterdir()) == ["day_00.map", "day_01.map", "day_02.map"]
    gt = GroundTruthMap.load(sim / "gt" / "day_02.map")
    assert gt.day == 2 and len(gt.keys) > 0
    m = _manifest(sim)
    for key in ("command", "config_paths", "seed", "effective_config", "outputs", "version", "duration_s"):
        assert key in m
    assert m["command"] == "simulate" and m["seed"] == 7
    assert len(m["outputs"]) == 1 + 3 * TINY["frames_per_day"] + 3


def test_default_day_count_gives_fourteen_days(tmp_path):
    sc = _write(tmp_path / "s.json", {"frames_per_day": 1})
    assert cli.main(["simulate", "--out", str(tmp_path / "o"), "--scenario", sc]) == 0
    assert len(list((tmp_path / "o").glob("day_*"))) == 14
    assert len(list((tmp_path / "o" / "gt").iterdir())) == 14


def test_days_flag_sets_day_count(tmp_path):
    sc = _write(tmp_path / "s.json", {"frames_per_day": 2})
    assert cli.main(["simulate", "--out", str(tmp_path / "o"), "--scenario", sc, "--days", "2"]) == 0
    assert len(list((tmp_path / "o").glob("day_*"))) == 2
    assert _manifest(tmp_path / "o")["effective_config"]["scenario"]["train_days"] == 1


def test_rerun_with_force_is_byte_identical_and_parallel_agrees(tmp_path, monkeypatch):
    sc = _write(tmp_path / "s.json", {"frames_per_day": 4, "days": 2, "train_days": 1})
    out = tmp_path / "o"
    assert cli.main(["simulate", "--out", str(out), "--scenario", sc]) == 0
    first = _files(out)
    assert cli.main(["simulate", "--out", str(out), "--scenario", sc]) == 6
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    assert cli.main(["simulate", "--out", str(out), "--scenario", sc, "--force"]) == 0
    assert _manifest(out)["effective_config"]["jobs"] == 2
    assert _files(out) == first


def test_seed_flag_beats_file_and_file_beats_profile(tmp_path):
    sc = _write(tmp_path / "s.json", {"frames_per_day": 2, "days": 2, "train_days": 1, "seed": 11})
    assert cli.main(["simulate", "--out", str(tmp_path / "a"), "--scenario", sc, "--profile", "smoke"]) == 0
    eff = _manifest(tmp_path / "a")["effective_config"]["scenario"]
    assert eff["seed"] == 11 and eff["frames_per_day"] == 2 and eff["train_days"] == 1
    assert cli.main(["simulate", "--out", str(tmp_path / "b"), "--scenario", sc, "--seed", "5"]) == 0
    m = _manifest(tmp_path / "b")
    assert m["seed"] == 5 and m["config_paths"]["scenario"] == sc


def test_invalid_config_field_is_named(tmp_path, capsys):
    sc = _write(tmp_path / "s.json", {"frames_per_day": 2, "dropout": 1.5})
    assert cli.main(["simulate", "--out", str(tmp_path / "o"), "--scenario", sc]) == 2
    assert "'dropout'" in capsys.readouterr().err
    sc = _write(tmp_path / "t.json", {"frames_per_dya": 2})
    assert cli.main(["simulate", "--out", str(tmp_path / "p"), "--scenario", sc]) == 2
    assert "frames_per_dya" in capsys.readouterr().err
    ok = _write(tmp_path / "ok.json", {"frames_per_day": 2})
    tc = _write(tmp_path / "tc.json", {"batch_size": 0})
    assert cli.main(["train-fusion", "--out", str(tmp_path / "q"), "--scenario", ok, "--train-config", tc]) == 2
    assert "'batch_size'" in capsys.readouterr().err


def test_missing_data_has_a_remediation_hint(tmp_path, capsys):
    assert cli.main(["train-perception", "--out", str(tmp_path / "o"), "--data", str(tmp_path / "none")]) == 3
    assert "recurrent-octomap simulate" in capsys.readouterr().err
    assert cli.main(["evaluate", "--out", str(tmp_path / "e"), "--backend", "bayes",
                     "--scenario", str(tmp_path / "none.json")]) == 3


def test_bad_flags_exit_with_configuration_code(tmp_path):
    assert cli.main(["evaluate", "--out", str(tmp_path), "--backend", "gru"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_exit_codes_per_error_class():
    assert cli.exit_code_for(ConfigurationError("x")) == 2
    assert cli.exit_code_for(DataPathError("x")) == 3
    assert cli.exit_code_for(FormatError("x")) == 4
    assert cli.exit_code_for(TrainingDivergedError("x")) == 5
    assert cli.exit_code_for(UndefinedMetricError("x")) == 5
    assert cli.exit_code_for(OutputExistsError("x")) == 6
    assert cli.exit_code_for(RuntimeError("x")) == 1


def test_train_perception_outputs(workspace):
    perc = workspace / "perc"
    report = json.loads((perc / "perception_report.json").read_text())
    assert 0.0 <= report["heldout_accuracy"] <= 1.0 and 0.0 <= report["yaw_robustness"] <= 1.0
    assert len(_rows(perc / "perception_loss.csv")) == 2


def test_train_fusion_from_simulated_data(workspace):
    fus = workspace / "fus"
    assert [r["epoch"] for r in _rows(fus / "fusion_loss.csv")] == ["1", "2"]
    m = _manifest(fus)
    assert m["effective_config"]["train"]["hidden_dim"] == 8 and m["sequences"] > 0


def test_resume_from_checkpoint_reproduces_the_continued_run(workspace, tmp_path):
    sim, model = str(workspace / "sim"), str(workspace / "perc" / cli.PERCEPTION_FILE)
    base = ["train-fusion", "--data", sim, "--model", model, "--profile", "smoke"]
    assert cli.main(base + ["--out", str(tmp_path / "full"), "--epochs", "3"]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "resumed"), "--epochs", "3",
                            "--resume", str(workspace / "fus" / cli.CHECKPOINT_FILE)]) == 0
    for name in (cli.FUSION_FILE, "fusion_loss.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()


def test_resume_with_changed_config_is_refused(workspace, tmp_path):
    assert cli.main(["train-fusion", "--out", str(tmp_path / "o"), "--data", str(workspace / "sim"),
                     "--model", str(workspace / "perc" / cli.PERCEPTION_FILE), "--profile", "smoke",
                     "--hidden-dim", "4", "--resume", str(workspace / "fus" / cli.CHECKPOINT_FILE)]) == 2


def test_bayes_needs_no_model_file(workspace, tmp_path):
    out = tmp_path / "e"
    assert cli.main(["evaluate", "--out", str(out), "--data", str(workspace / "sim"), "--backend", "bayes"]) == 0
    rows = _rows(out / "metrics.csv")
    assert [(r["day"], r["backend"]) for r in rows] == [("2", "bayes"), ("mean", "bayes")]
    assert json.loads((out / "metrics.json").read_text())[0]["confusion"]


def _eval(workspace, out, *extra):
    return cli.main(["evaluate", "--out", str(out), "--data", str(workspace / "sim"), "--profile", "smoke",
                     "--model", str(workspace / "perc" / cli.PERCEPTION_FILE),
                     "--model", str(workspace / "fus" / cli.FUSION_FILE), *extra])


def test_sweep_emits_one_row_per_mntd_per_day(workspace, tmp_path):
    assert _eval(workspace, tmp_path / "s", "--sweep-mntd", "--snapshots") == 0
    rows = _rows(tmp_path / "s" / "metrics.csv")
    per_day = [r for r in rows if r["day"] != "mean"]
    test_days = TINY["days"] - TINY["train_days"]
    assert len(per_day) == len(cli.SWEEP_MNTD) * test_days
    assert sorted({r["mntd"] for r in per_day}) == sorted(cli.SWEEP_MNTD)
    assert len(list((tmp_path / "s" / "snapshots").iterdir())) == len(cli.SWEEP_MNTD) * test_days


def test_compare_emits_table_and_matches_single_backend_runs(workspace, tmp_path):
    assert _eval(workspace, tmp_path / "c", "--compare") == 0
    table = _rows(tmp_path / "c" / "table.csv")
    assert list(table[0]) == ["metric", "backend", "day3", "mean"]
    assert [(r["metric"], r["backend"]) for r in table] == [
        (m, b) for m in ("overall_accuracy", "mean_accuracy", "mean_iou") for b in ("bayes", "lstm", "naplstm[day]")]
    assert _eval(workspace, tmp_path / "l", "--backend", "lstm") == 0
    together = [r for r in _rows(tmp_path / "c" / "metrics.csv") if r["backend"] == "lstm"]
    assert together == _rows(tmp_path / "l" / "metrics.csv")


def test_backend_model_mismatch_is_a_configuration_error(workspace, tmp_path, capsys):
    sim = str(workspace / "sim")
    assert cli.main(["evaluate", "--out", str(tmp_path / "a"), "--data", sim, "--backend", "naplstm"]) == 2
    # fusion weights trained on the perception model's features, evaluated on the reference prototypes
    assert cli.main(["evaluate", "--out", str(tmp_path / "b"), "--data", sim, "--backend", "lstm",
                     "--model", str(workspace / "fus" / cli.FUSION_FILE)]) == 2
    assert "different observation model" in capsys.readouterr().err
    assert cli.main(["evaluate", "--out", str(tmp_path / "c"), "--data", sim, "--backend", "bayes",
                     "--mntd", "10"]) == 2
    assert _eval(workspace, tmp_path / "d", "--backend", "naplstm", "--mntd", "soon") == 2


def test_smoke_reproduce_finishes_quickly(tmp_path, capsys):
    t0 = time.perf_counter()
    assert cli.main(["reproduce", "--out", str(tmp_path / "r"), "--profile", "smoke"]) == 0
    assert time.perf_counter() - t0 < 300
    out = capsys.readouterr().out
    assert "backend ordering" in out and "MNTD sweep shape" in out
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert {c["name"] for c in summary["checks"]} == {"backend ordering", "MNTD sweep shape"}
    assert len(_rows(tmp_path / "r" / "sweep.csv")) == 3 * len(cli.SWEEP_MNTD)
