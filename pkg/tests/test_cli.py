import json
import subprocess
import sys

import pytest

from loadattack.cli import main

SMALL = """dataset.days = 2
agent.episodes = 1
agent.rollout_length = 48
attack.procedure = fgm
attack.epsilons = [0.0, 0.03]
detect.pairs = 3
detect.bootstraps = 20
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "stealthy.cfg"
    path.write_text(SMALL + "attack.preset = stealthy\n")
    return path


def test_attack_writes_logs_and_report(tmp_path, cfg, capsys):
    out = tmp_path / "r"
    assert main(["attack", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    assert "clean KPI" in capsys.readouterr().out
    assert (out / "logs/attack_fgm_eps0.03.jsonl").is_file()
    report = json.loads((out / "reports/run_report.json").read_text())
    assert report["seed"] == 7 and len(report["runs"]) == 2


@pytest.mark.parametrize("command", ["train", "atla", "snoop", "detect", "sweep"])
def test_subcommands_succeed(tmp_path, cfg, command):
    path = tmp_path / "c.cfg"
    path.write_text(cfg.read_text() + "atla.period = 1\natla.alternations = 1\n")
    assert main([command, "--config", str(path), "--out", str(tmp_path / "r"), "--quiet"]) == 0


def test_report_aggregates(tmp_path, cfg, capsys):
    for seed in ("1", "2"):
        assert main(["attack", "--config", str(cfg), "--seed", seed, "--out", str(tmp_path / "runs" / seed), "--quiet"]) == 0
    capsys.readouterr()
    assert main(["report", "--out", str(tmp_path / "runs")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].split()[:2] == ["run", "seed"]
    assert len(table.splitlines()) == 1 + 4
    assert (tmp_path / "runs/reports/comparison.txt").is_file()


def test_missing_config_exit_1(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    assert main(["attack", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert main(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["attack", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1


def test_invalid_config_exit_1(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("attack.epsilonn = 0.1\n")
    assert main(["attack", "--config", str(path), "--out", str(tmp_path / "r")]) == 1


def test_negative_seed_rejected(tmp_path, cfg):
    assert main(["attack", "--config", str(cfg), "--seed", "-3", "--out", str(tmp_path / "r")]) == 1


def test_runtime_failure_exit_2(tmp_path, cfg, monkeypatch, capsys):
    from loadattack.harness import Pipeline

    def boom(self, procedure=None):
        raise RuntimeError("kaput")

    monkeypatch.setattr(Pipeline, "attack", boom)
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "stage 'attack'" in capsys.readouterr().err


def test_report_on_empty_dir_exit_1(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "loadattack.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("train", "atla", "attack", "snoop", "detect", "sweep", "report"):
        assert name in proc.stdout
