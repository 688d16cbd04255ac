import dataclasses
import subprocess
import sys

import pytest

from occslam.cli import build_parser, main
from occslam.core import SolverConfig
from occslam.io import parse_dataset, read_metrics, read_trajectory, write_trajectory

FAST = ["--resolution-s", "0.4", "--tau-k", "3"]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--scenario", "room", "--seed", "1", "--n-poses", "20", "--beams", "181", "--out", str(d)]) == 0
    return d


def test_simulate_outputs(sim_dir):
    for name in ("dataset.txt", "world.json", "ground_truth.txt"):
        assert (sim_dir / name).exists()
    ds = parse_dataset(sim_dir / "dataset.txt")
    assert len(ds) == 20 and ds.records[0].n_beams == 181
    assert len(read_trajectory(sim_dir / "ground_truth.txt")) == 20


def test_solve_end_to_end(sim_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["solve", str(sim_dir / "dataset.txt"), "--init", "odometry", "--out", str(out), "--covariance"] + FAST) == 0
    for name in ("trajectory.txt", "map_evidence.pgm", "map_evidence.meta", "map_probability.pgm",
                 "uncertainty.pgm", "metrics.txt"):
        assert (out / name).exists(), name
    m = read_metrics(out / "metrics.txt")
    assert {"mae_translation", "init_mae_translation", "auc", "iterations"} <= set(m)
    assert "mae_translation" in capsys.readouterr().out


def test_solve_reproducible(sim_dir, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["solve", str(sim_dir / "dataset.txt"), "--out", str(out), "--threads", "1"] + FAST) == 0
        runs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert runs[0] == runs[1]


def test_solve_init_file_and_perturb(sim_dir, tmp_path):
    out = tmp_path / "f"
    argv = ["solve", str(sim_dir / "dataset.txt"), "--init", "file", "--init-file", str(sim_dir / "ground_truth.txt"),
            "--perturb-init", "0.05", "0.01", "3", "--out", str(out)] + FAST
    assert main(argv) == 0
    assert len(read_trajectory(out / "trajectory.txt")) == 20


def test_output_dir_env(sim_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("OCCSLAM_OUTPUT_DIR", str(tmp_path / "envout"))
    assert main(["solve", str(sim_dir / "dataset.txt")] + FAST) == 0
    assert (tmp_path / "envout" / "solve" / "trajectory.txt").exists()


def test_help_exit_zero(capsys):
    assert main(["solve", "--help"]) == 0
    text = capsys.readouterr().out
    # every solver setting is reachable from the command line
    for f in dataclasses.fields(SolverConfig):
        assert f.name.replace("_", "-") in text


def test_unknown_flag_exit_two(capsys):
    assert main(["solve", "x.txt", "--warp-drive"]) == 2
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "occslam", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "occslam", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout


def test_evaluate(sim_dir, tmp_path, capsys):
    gt = read_trajectory(sim_dir / "ground_truth.txt")
    write_trajectory(gt, tmp_path / "est.txt")
    assert main(["evaluate", "--estimate", str(tmp_path / "est.txt"), "--dataset", str(sim_dir / "dataset.txt"),
                 "--out", str(tmp_path / "m.txt")]) == 0
    assert read_metrics(tmp_path / "m.txt")["mae_translation"] == 0.0

    write_trajectory(gt[:-3], tmp_path / "short.txt")
    capsys.readouterr()
    assert main(["evaluate", "--estimate", str(tmp_path / "short.txt"), "--gt", str(sim_dir / "ground_truth.txt")]) == 1
    assert "lengths differ" in capsys.readouterr().err


def test_subsample(sim_dir, tmp_path):
    out = tmp_path / "half.txt"
    assert main(["subsample", str(sim_dir / "dataset.txt"), "--rate", "0.5", "--out", str(out)]) == 0
    ds = parse_dataset(out)
    assert len(ds) == 10 and ds.has_odometry
    assert main(["subsample", str(sim_dir / "dataset.txt"), "--rate", "1.5", "--out", str(out)]) == 1


def test_missing_file_exit_one(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "nope.txt")] + FAST) == 1
    assert "error" in capsys.readouterr().err


def test_bad_threads(sim_dir):
    assert main(["solve", str(sim_dir / "dataset.txt"), "--threads", "0"]) == 1


def test_solver_abort_exit_one(sim_dir, tmp_path, monkeypatch):
    from occslam import solver
    from occslam.solver import LinearSolveError

    def boom(*a, **k):
        raise LinearSolveError("not positive definite")

    monkeypatch.setattr(solver, "solve_linear", boom)
    assert main(["solve", str(sim_dir / "dataset.txt"), "--out", str(tmp_path / "x")] + FAST) == 1


def test_parser_flags_match_config():
    sub = build_parser()._subparsers._group_actions[0].choices["solve"]
    dests = {a.dest for a in sub._actions}
    assert {f.name for f in dataclasses.fields(SolverConfig)} <= dests
