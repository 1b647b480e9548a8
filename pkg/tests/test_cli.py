import csv
import json

import pytest

from vims.cli import EXIT_CONFIG, EXIT_ESTIMATOR, EXIT_IO, EXIT_OK, main
from vims.loop_closing import read_decision_log

SHORT = "family = lawnmower\nduration = 45\n"


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "short.cfg").write_text(SHORT)
    assert main(["simulate", "--config", str(root / "short.cfg"), "--seed", "2", "--out", str(root / "ds")]) == 0
    assert main(["run", "--dataset", str(root / "ds"), "--out", str(root / "run")]) == 0
    return root


def test_simulate_outputs(short_run):
    names = sorted(p.name for p in (short_run / "ds").iterdir())
    assert "groundtruth.tum" in names and "dataset.jsonl" in names


def test_run_outputs(short_run):
    run = short_run / "run"
    for name in ("trajectory.tum", "vio_trajectory.tum", "decision_log.csv", "map.json", "run_info.json",
                 "pose_graph_stats.csv"):
        assert (run / name).exists(), name
    info = json.loads((run / "run_info.json").read_text())
    assert info["preset"] == "full"


def test_eval_ground_truth_is_zero(short_run, tmp_path):
    gt = short_run / "ds" / "groundtruth.tum"
    out = tmp_path / "r.json"
    assert main(["eval", "--run", str(gt), "--truth", str(gt), "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["trans_rmse"] < 1e-9 and rep["rot_rmse"] < 1e-6


def test_eval_run_dir(short_run, capsys):
    run = short_run / "run"
    assert main(["eval", "--run", str(run), "--truth", str(short_run / "ds" / "groundtruth.tum")]) == EXIT_OK
    rep = json.loads((run / "report.json").read_text())
    assert rep["preset"] == "full"
    assert 0.0 <= rep["trans_rmse"] < 0.1
    assert 0 <= rep["loops_correct"] <= rep["loops_total"]
    assert '"trans_rmse"' in capsys.readouterr().out


def test_report_outputs(short_run, tmp_path):
    out = tmp_path / "rep"
    assert main(["report", "--run", str(short_run / "run"), "--truth", str(short_run / "ds" / "groundtruth.tum"),
                 "--out", str(out)]) == EXIT_OK
    with open(out / "pr_points.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["mode"] for r in rows} == {"magnetic", "visual", "hierarchical"}
    assert sum(int(r["best"]) for r in rows) == 3
    log = read_decision_log(short_run / "run" / "decision_log.csv")
    with open(out / "recognition_matrix.csv") as fh:
        lines = fh.read().splitlines()
    assert len(lines) - 1 == len({r.query_idx for r in log})
    with open(out / "trajectories.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:4] == ["t", "estimate_x", "estimate_y", "estimate_z"]


def test_toggles_select_preset(short_run, tmp_path):
    out = tmp_path / "geo"
    assert main(["run", "--dataset", str(short_run / "ds"), "--toggles", "use_geomagnetic=false",
                 "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "run_info.json").read_text())["preset"] == "wo_geom"


def test_vocab(tmp_path):
    assert main(["vocab", "--out", str(tmp_path / "v.json")]) == EXIT_OK
    assert json.loads((tmp_path / "v.json").read_text())


# ---------------------------------------------------------------- exit codes
def test_estimator_failure_exit_code(short_run, tmp_path):
    assert main(["run", "--dataset", str(short_run / "ds"), "--preset", "wo_sonar",
                 "--out", str(tmp_path / "x")]) == EXIT_ESTIMATOR


def test_ablate_marks_failed_preset(short_run, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--dataset", str(short_run / "ds"), "--presets", "full,wo_sonar",
                 "--out", str(out)]) == EXIT_OK
    with open(out / "ablation.csv") as fh:
        codes = {r["preset"]: int(r["exit_code"]) for r in csv.DictReader(fh)}
    assert codes == {"full": EXIT_OK, "wo_sonar": EXIT_ESTIMATOR}


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["run", "--dataset", "x"],
    ["ablate", "--dataset", "x", "--presets", "full,bogus"],
])
def test_usage_errors(argv, tmp_path):
    assert main(argv) == EXIT_CONFIG


def test_config_errors(short_run, tmp_path):
    ds = str(short_run / "ds")
    assert main(["run", "--dataset", ds, "--toggles", "use_laser=true", "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    (tmp_path / "bad.cfg").write_text("family = lawnmower\nwarp_drive = 1\n")
    assert main(["simulate", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "b")]) == EXIT_CONFIG
    (tmp_path / "bad2.cfg").write_text("this line has no equals sign\n")
    assert main(["simulate", "--config", str(tmp_path / "bad2.cfg"), "--out", str(tmp_path / "c")]) == EXIT_CONFIG
    (tmp_path / "run.cfg").write_text("ratio = 1.5\n")
    assert main(["run", "--dataset", ds, "--config", str(tmp_path / "run.cfg"), "--out", str(tmp_path / "d")]) \
        == EXIT_CONFIG
    assert main(["eval", "--run", str(short_run / "run")]) == EXIT_CONFIG


def test_io_errors(short_run, tmp_path):
    assert main(["run", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["eval", "--run", str(short_run / "run"), "--truth", str(tmp_path / "none.tum")]) == EXIT_IO
    assert main(["simulate", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == EXIT_IO
