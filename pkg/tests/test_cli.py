"""Command-line behavior, exercised in process through main()."""

import json

import pytest

from scoredesk import cli
from scoredesk.config import load_config

FAST = ["--set", "train.steps=6", "--set", "train.snapshot_every=0",
        "--set", "train.divergence_n_mc=200",
        "--set", "generator.n_particles=8"]


def test_run_defaults_exit_zero(tmp_path, capsys):
    rc = cli.main(["run", "-o", str(tmp_path / "r")] + FAST)
    assert rc == 0
    out = capsys.readouterr().out
    assert "done: 6 steps" in out
    for name in ("config.yaml", "trace.csv", "report.json"):
        assert (tmp_path / "r" / name).exists()
    saved = load_config(tmp_path / "r" / "config.yaml")
    assert saved["train"]["steps"] == 6
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["steps_run"] == 6 and report["aborted"] is False


def test_run_reads_config_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("train:\n  steps: 4\n  snapshot_every: 0\n"
                 "  divergence_n_mc: 100\ngenerator:\n  n_particles: 6\n")
    rc = cli.main(["run", "-c", str(p), "-o", str(tmp_path / "r")])
    assert rc == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["steps_run"] == 4


def test_unknown_override_is_config_error(tmp_path, capsys):
    rc = cli.main(["run", "-o", str(tmp_path / "r"),
                   "--set", "train.stepz=6"])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_is_config_error(tmp_path, capsys):
    rc = cli.main(["run", "-c", str(tmp_path / "absent.yaml"),
                   "-o", str(tmp_path / "r")])
    assert rc == 2


def test_aborting_run_exits_three(tmp_path, capsys):
    rc = cli.main(["run", "-o", str(tmp_path / "r"), "--set", "train.lr=1e12",
                   "--set", "train.steps=10",
                   "--set", "train.track_divergence=false",
                   "--set", "generator.n_particles=8"])
    assert rc == 3
    assert "abort" in capsys.readouterr().err
    assert (tmp_path / "r" / "abort.json").exists()


def test_sweep_grid_serial(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    rc = cli.main(["sweep", "-o", str(tmp_path / "s"),
                   "--axis", "objective.gamma=0.0,2.0",
                   "--axis", "seed=0,1"] + FAST)
    assert rc == 0
    lines = (tmp_path / "s" / "sweep_summary.csv").read_text().strip().split("\n")
    assert lines[0] == "run,objective.gamma,seed,hash,status,entropy,divergence"
    assert len(lines) == 5
    hashes = set()
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert cells[0] == f"run_{i:03d}"
        assert cells[4] == "ok"
        hashes.add(cells[3])
        assert (tmp_path / "s" / f"run_{i:03d}" / "report.json").exists()
    assert len(hashes) == 4


def test_sweep_keeps_going_past_aborts(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    rc = cli.main(["sweep", "-o", str(tmp_path / "s"),
                   "--axis", "train.lr=0.005,1e12"] + FAST +
                  ["--set", "train.track_divergence=false"])
    assert rc == 3
    lines = (tmp_path / "s" / "sweep_summary.csv").read_text().strip().split("\n")
    statuses = [l.split(",")[2] for l in lines[1:]]
    assert statuses == ["ok", "aborted"]


def test_sweep_parallel_smoke(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "2")
    rc = cli.main(["sweep", "-o", str(tmp_path / "s"),
                   "--axis", "seed=0,1"] + FAST)
    assert rc == 0
    lines = (tmp_path / "s" / "sweep_summary.csv").read_text().strip().split("\n")
    assert len(lines) == 3


@pytest.mark.parametrize("bad", ["abc", "0", "-2"])
def test_invalid_thread_cap_is_config_error(tmp_path, monkeypatch, bad):
    monkeypatch.setenv(cli.THREADS_ENV, bad)
    rc = cli.main(["sweep", "-o", str(tmp_path / "s"),
                   "--axis", "seed=0,1"] + FAST)
    assert rc == 2


def test_malformed_axis_is_config_error(tmp_path):
    rc = cli.main(["sweep", "-o", str(tmp_path / "s"), "--axis", "seed"])
    assert rc == 2
    rc = cli.main(["sweep", "-o", str(tmp_path / "s"), "--axis", "seed="])
    assert rc == 2


def test_verify_failure_exits_one(monkeypatch, capsys):
    fake = [{"name": "broken_check", "value": 9.0, "threshold": 1.0,
             "pass": False, "seconds": 0.01}]
    monkeypatch.setattr(cli, "verify_suite", lambda quick=False: fake)
    rc = cli.main(["verify"])
    assert rc == 1
    assert "FAIL" in capsys.readouterr().out


def test_verify_json_output(monkeypatch, capsys):
    fake = [{"name": "ok_check", "value": 0.0, "threshold": 1.0,
             "pass": True, "seconds": 0.01}]
    monkeypatch.setattr(cli, "verify_suite", lambda quick=False: fake)
    rc = cli.main(["verify", "--json"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out)[0]["name"] == "ok_check"


def test_verify_quick_suite_passes(capsys):
    rc = cli.main(["verify", "--quick"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "7/7 checks passed" in out
