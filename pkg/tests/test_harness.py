import json

import pytest
from hypothesis import given, strategies as st

from loadattack import harness
from loadattack.harness import (
    ConfigError,
    ExperimentConfig,
    Pipeline,
    StageError,
    aggregate_reports,
    derive_seed,
    recompute_regret,
    run_pipeline,
    run_sweep,
)

SMALL = """
# tiny run for tests
dataset.days = 3
agent.episodes = 2
agent.rollout_length = 72
attack.procedure = pgd
attack.iterations = 8
attack.epsilons = [0.0, 0.05]
detect.pairs = 4
detect.bootstraps = 40
"""


def small(**overrides):
    return ExperimentConfig.from_text(SMALL).with_overrides(**overrides)


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- configuration -------------------------------------------------------------------


def test_defaults_round_trip():
    c = ExperimentConfig()
    back = ExperimentConfig.from_text(c.to_text())
    assert back.values == c.values and back.digest() == c.digest()


def test_parser_values_and_comments():
    c = ExperimentConfig.from_text("seed = 4  # master\nattack.procedure = fgm\nattack.epsilons = [0.01, 0.02]\n")
    assert c["seed"] == 4 and c["attack.procedure"] == "fgm" and c["attack.epsilons"] == [0.01, 0.02]


@pytest.mark.parametrize(
    "text, match",
    [
        ("atack.epsilon = 0.1", "unknown key 'atack.epsilon'"),
        ("seed = 1\nseed = 2", "duplicate"),
        ("seed", "key = value"),
        ("version = 2", "version"),
        ("attack.procedure = laser", "procedure"),
        ("attack.epsilon = -0.1", "non-negative"),
        ("attack.epsilon = big", "number"),
        ("agent.action_space = hybrid", "action_space"),
        ("dataset.source = file", "dataset.path"),
        ("dataset.source = file\ndataset.path = /nonexistent.csv", "/nonexistent.csv"),
        ("agent.training = load", "agent.path"),
        ("agent.gamma = 0", "discount"),
        ("attack.decays = 0", "decays"),
        ("seed = -1", "seed"),
    ],
)
def test_invalid_configs(text, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_text(text)


def test_missing_config_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.cfg"):
        ExperimentConfig.load(tmp_path / "nope.cfg")


def test_digest_ignores_output_directory():
    assert small(out="a").digest() == small(out="b").digest()
    assert small(seed=1).digest() != small(seed=2).digest()


# -- seeds ---------------------------------------------------------------------------


def test_seed_derivation_documented_formula():
    import hashlib

    expected = int.from_bytes(hashlib.sha256(b"7/attack/2").digest()[:8], "big") & (2**63 - 1)
    assert derive_seed(7, "attack", 2) == expected


@given(st.integers(0, 2**64 - 1), st.sampled_from(["train", "attack", "detect", "proxy"]), st.integers(0, 100))
def test_seed_derivation_is_pure_and_separating(master, stage, i):
    s = derive_seed(master, stage, i)
    assert s == derive_seed(master, stage, i) and 0 <= s < 2**63
    assert s != derive_seed(master + 1, stage, i)
    assert s != derive_seed(master, stage, i + 1)
    assert s != derive_seed(master, stage + "x", i)


# -- pipeline ------------------------------------------------------------------------


def test_zero_budget_run_has_zero_regret(tmp_path):
    report = run_pipeline(small(), tmp_path / "r")
    zero = report.runs[0]
    assert zero["epsilon"] == 0.0 and zero["asr"] == 0.0
    assert all(v == 0.0 for v in zero["regret"].values())
    for d in ("agents", "logs", "reports"):
        assert (tmp_path / "r" / d).is_dir()


def test_rerun_is_byte_identical(tmp_path):
    run_pipeline(small(**{"detect.enabled": True}), tmp_path / "a")
    run_pipeline(small(**{"detect.enabled": True}), tmp_path / "b")
    a, b = read_tree(tmp_path / "a"), read_tree(tmp_path / "b")
    a.pop("config.cfg"), b.pop("config.cfg")
    assert a == b


def test_rerun_in_place_reuses_agent_and_reproduces(tmp_path):
    run_pipeline(small(), tmp_path / "r")
    first = read_tree(tmp_path / "r")
    run_pipeline(small(), tmp_path / "r")
    assert read_tree(tmp_path / "r") == first


def test_master_seed_changes_outputs(tmp_path):
    run_pipeline(small(seed=1), tmp_path / "a")
    run_pipeline(small(seed=2), tmp_path / "b")
    assert (tmp_path / "a/logs/clean.jsonl").read_bytes() != (tmp_path / "b/logs/clean.jsonl").read_bytes()


def test_report_regret_matches_logs(tmp_path):
    report = run_pipeline(small(), tmp_path / "r")
    for run in report.runs:
        tag = f"{run['procedure']}_eps{run['epsilon']:g}"
        assert recompute_regret(tmp_path / "r", tag) == run["regret"]


@pytest.mark.parametrize("procedure", ["fgm", "random", "snoop", "dynamic", "targeted", "none"])
def test_procedures_run(tmp_path, procedure):
    config = small(**{"attack.procedure": procedure, "attack.epsilons": [0.05], "attack.adversary_episodes": 1})
    report = run_pipeline(config, tmp_path / "r")
    assert report.runs[0]["procedure"] == procedure
    assert report.runs[0]["max_linf"] <= (0.2 if procedure == "dynamic" else 0.05)


def test_continuous_stealthy_detect(tmp_path):
    config = small(**{"agent.action_space": "continuous", "attack.preset": "stealthy", "attack.bifurcation": True})
    report = run_pipeline(config, tmp_path / "r", stages=["train", "attack", "detect", "report"])
    assert report.detection["metadata"]["bootstraps"] == 40
    assert (tmp_path / "r/reports/detection.json").is_file()
    assert "observation MMD" in (tmp_path / "r/reports/run_report.txt").read_text()


def test_atla_and_load(tmp_path):
    config = small(**{"agent.training": "atla", "atla.period": 1, "atla.alternations": 1})
    run_pipeline(config, tmp_path / "a", stages=["train", "report"])
    manifest = json.loads((tmp_path / "a/agents/victim/manifest.json").read_text())
    assert manifest["atla"]["alternations"] == 1
    loaded = small(**{"agent.training": "load", "agent.path": str(tmp_path / "a/agents/victim")})
    report = run_pipeline(loaded, tmp_path / "b")
    assert report.agent["training"] == "load"


def test_file_dataset(tmp_path):
    from loadattack.env import generate_synthetic, save_dataset

    save_dataset(generate_synthetic(3, 2), tmp_path / "d.csv")
    config = small(**{"dataset.source": "file", "dataset.path": str(tmp_path / "d.csv")})
    report = run_pipeline(config, tmp_path / "r")
    assert len(report.runs) == 2


def test_stage_failure_names_stage_and_keeps_outputs(tmp_path, monkeypatch):
    def boom(self, procedure=None):
        raise RuntimeError("attack exploded")

    monkeypatch.setattr(Pipeline, "attack", boom)
    with pytest.raises(StageError, match="stage 'attack'.*attack exploded") as info:
        run_pipeline(small(), tmp_path / "r")
    assert info.value.stage == "attack"
    assert (tmp_path / "r/logs/clean.jsonl").is_file()
    assert (tmp_path / "r/agents/victim/manifest.json").is_file()


def test_sweep_and_aggregate(tmp_path):
    config = small(**{"sweep.seeds": [0, 1], "sweep.workers": 2, "out": str(tmp_path / "s")})
    reports = run_sweep(config)
    assert [r["seed"] for r in reports] == [0, 1]
    table = (tmp_path / "s/reports/comparison.txt").read_text()
    assert table.count("\n") == 1 + 4
    rows = json.loads((tmp_path / "s/reports/comparison.json").read_text())
    assert {r["run"] for r in rows} == {"seed_0", "seed_1"}
    # the same seeds run serially give the same reports
    serial = run_sweep(config.with_overrides(**{"sweep.workers": 1, "out": str(tmp_path / "t")}))
    assert serial == reports


def test_aggregate_requires_reports(tmp_path):
    with pytest.raises(ConfigError, match="no run reports"):
        aggregate_reports(tmp_path)


def test_sweep_series_written(tmp_path):
    run_pipeline(small(), tmp_path / "r")
    lines = (tmp_path / "r/reports/sweep_series.csv").read_text().splitlines()
    assert lines[0].startswith("procedure,epsilon,asr") and len(lines) == 3


def test_schema_version_constant():
    assert harness.DEFAULTS["version"] == harness.SCHEMA_VERSION
