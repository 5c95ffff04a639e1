"""Experiment orchestration: configuration, seeded pipelines and reports.

A run reads one flat configuration, then executes up to four stages in
order (train, attack, detect, report), persisting everything under::

    <out>/agents/    trained victim, adversarial policy and proxy manifests
    <out>/logs/      baseline, clean and attacked episode logs, attack outcomes
    <out>/reports/   run_report.json, run_report.txt, sweep_series.csv

Configuration files hold one ``section.key = value`` per line. Values are
parsed as JSON when possible and kept as bare strings otherwise; ``#`` starts
a comment. Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .agents import (
    ActionSpace,
    AtlaConfig,
    PolicyAgent,
    PpoConfig,
    atla_train,
    category_bound,
    ppo_train,
    train_adversarial_policy,
)
from .attacks import (
    AttackBudget,
    DynamicDistortionAttack,
    NoAttack,
    PgdSchedule,
    RandomNoiseAttack,
    SnoopingAttack,
    TargetedAttack,
    WhiteBoxAttack,
    attack_metrics,
    closed_loop_attack,
    stealthy_budget,
    train_proxy,
    write_outcomes,
)
from .detect import detect_episode
from .env import KPI_NAMES, DemandResponseEnv, compute_kpis, generate_synthetic, load_dataset, null_episode, read_logs, run_episode, write_logs

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PACKAGE_VERSION = "0.1.0"

PROCEDURES = ("none", "fgm", "pgd", "dynamic", "targeted", "random", "snoop")
STAGES = ("train", "attack", "detect", "report")

# every accepted key with its default; the type of the default is enforced
DEFAULTS: dict = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "out": "runs/default",
    "dataset.source": "synthetic",
    "dataset.path": None,
    "dataset.days": 30,
    "dataset.seed": None,
    "agent.action_space": "discrete",
    "agent.bins": 20,
    "agent.training": "ppo",
    "agent.path": None,
    "agent.episodes": 100,
    "agent.lr": 1e-3,
    "agent.entropy_coef": 0.01,
    "agent.reward_scale": 0.1,
    "agent.gamma": 0.95,
    "agent.gae_lambda": 0.95,
    "agent.clip": 0.2,
    "agent.epochs": 10,
    "agent.rollout_length": 720,
    "agent.minibatch_size": 120,
    "agent.hidden": [64, 64],
    "agent.init_log_std": -0.5,
    "atla.period": 10,
    "atla.alternations": 10,
    "atla.adversary_init_log_std": -1.5,
    "atla.bounds": None,
    "attack.procedure": "none",
    "attack.epsilon": 0.05,
    "attack.preset": None,
    "attack.bifurcation": False,
    "attack.method": "pgd",
    "attack.stepsize": 0.01,
    "attack.iterations": 100,
    "attack.decays": 4,
    "attack.rate": 0.5,
    "attack.candidates": [0.01, 0.02, 0.05, 0.1, 0.2],
    "attack.adversary_episodes": 100,
    "attack.epsilons": [],
    "detect.enabled": False,
    "detect.pairs": 100,
    "detect.bootstraps": 10000,
    "sweep.seeds": [],
    "sweep.workers": 1,
}

_NULLABLE = {k for k, v in DEFAULTS.items() if v is None}
_NUMERIC = {k for k, v in DEFAULTS.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 1."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(master: int, stage: str, i: int = 0) -> int:
    """Sub-seed for stage ``stage``, index ``i``: first 8 bytes of SHA-256 of ``"master/stage/i"``, masked to 63 bits."""
    digest = hashlib.sha256(f"{int(master)}/{stage}/{int(i)}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        merged = dict(DEFAULTS)
        merged.update(self.values)
        self.values = merged
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{n}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"{source}:{n}: duplicate key '{key}'")
            values[key] = _parse_value(value)
        return cls(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        values = dict(self.values)
        for key, value in overrides.items():
            key = key.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key '{key}'")
            values[key] = value
        return ExperimentConfig(values)

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(self.values[k])}\n" for k in DEFAULTS)

    def digest(self) -> str:
        """Hash of everything that affects results (output directory and worker count excluded)."""
        body = {k: v for k, v in self.values.items() if k not in ("out", "sweep.workers")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        v = self.values
        unknown = set(v) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        for key, value in v.items():
            if value is None:
                if key not in _NULLABLE:
                    raise ConfigError(f"'{key}' may not be null")
            elif key in _NUMERIC and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"'{key}' must be a number, got {value!r}")
        if v["version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {v['version']} (expected {SCHEMA_VERSION})")
        if not isinstance(v["seed"], int) or v["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if v["dataset.source"] not in ("synthetic", "file"):
            raise ConfigError("dataset.source must be 'synthetic' or 'file'")
        if v["dataset.source"] == "file":
            if not v["dataset.path"]:
                raise ConfigError("dataset.path is required when dataset.source = file")
            if not Path(v["dataset.path"]).is_file():
                raise ConfigError(f"dataset file not found: {v['dataset.path']}")
        if v["agent.action_space"] not in ("discrete", "continuous"):
            raise ConfigError("agent.action_space must be 'discrete' or 'continuous'")
        if v["agent.training"] not in ("ppo", "atla", "load"):
            raise ConfigError("agent.training must be 'ppo', 'atla' or 'load'")
        if v["agent.training"] == "load":
            if not v["agent.path"]:
                raise ConfigError("agent.path is required when agent.training = load")
            if not (Path(v["agent.path"]) / "manifest.json").is_file():
                raise ConfigError(f"agent directory not found: {v['agent.path']}")
        if v["attack.procedure"] not in PROCEDURES:
            raise ConfigError(f"attack.procedure must be one of {PROCEDURES}")
        if v["attack.preset"] not in (None, "stealthy"):
            raise ConfigError("attack.preset must be null or 'stealthy'")
        if v["attack.method"] not in ("fgm", "pgd"):
            raise ConfigError("attack.method must be 'fgm' or 'pgd'")
        if v["attack.epsilon"] < 0 or any(e < 0 for e in v["attack.epsilons"]):
            raise ConfigError("attack budgets must be non-negative")
        if not isinstance(v["attack.bifurcation"], bool) or not isinstance(v["detect.enabled"], bool):
            raise ConfigError("attack.bifurcation and detect.enabled must be true or false")
        if v["sweep.workers"] < 1:
            raise ConfigError("sweep.workers must be >= 1")
        try:
            self.ppo_config(0)
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views ---------------------------------------------------------------

    def action_space(self) -> ActionSpace:
        if self["agent.action_space"] == "discrete":
            return ActionSpace("discrete", int(self["agent.bins"]))
        return ActionSpace("continuous")

    def ppo_config(self, seed: int, **overrides) -> PpoConfig:
        v = self.values
        kwargs = dict(
            lr=v["agent.lr"],
            clip=v["agent.clip"],
            epochs=int(v["agent.epochs"]),
            rollout_length=int(v["agent.rollout_length"]),
            minibatch_size=int(v["agent.minibatch_size"]),
            gamma=v["agent.gamma"],
            gae_lambda=v["agent.gae_lambda"],
            entropy_coef=v["agent.entropy_coef"],
            episodes=int(v["agent.episodes"]),
            seed=seed,
            hidden=tuple(v["agent.hidden"]),
            reward_scale=v["agent.reward_scale"],
            init_log_std=v["agent.init_log_std"],
        )
        kwargs.update(overrides)
        return PpoConfig(**kwargs)

    def schedule(self) -> PgdSchedule:
        v = self.values
        return PgdSchedule(v["attack.stepsize"], int(v["attack.iterations"]), int(v["attack.decays"]), v["attack.rate"])

    def epsilons(self) -> list[float]:
        return [float(e) for e in self["attack.epsilons"]] or [float(self["attack.epsilon"])]


# -- pipeline ----------------------------------------------------------------------


@dataclass
class RunReport:
    config_hash: str
    version: str
    seed: int
    agent: dict
    clean_kpi: dict
    runs: list
    detection: dict | None = None

    def to_dict(self) -> dict:
        return {
            "kind": "run_report",
            "config_hash": self.config_hash,
            "version": self.version,
            "seed": self.seed,
            "agent": self.agent,
            "clean_kpi": self.clean_kpi,
            "runs": self.runs,
            "detection": self.detection,
        }

    def sweep_rows(self) -> list[dict]:
        rows = []
        for r in self.runs:
            row = {"procedure": r["procedure"], "epsilon": r["epsilon"], "asr": r["asr"], "mae": r["mae"], "reversal": r["reversal"]}
            for k in KPI_NAMES:
                row[f"kpi_{k}"] = r["attacked_kpi"][k]
                row[f"regret_{k}"] = r["regret"][k]
            rows.append(row)
        return rows

    def table(self) -> str:
        head = f"config {self.config_hash}  seed {self.seed}  agent {self.agent['action_space']} ({self.agent['training']})\n"
        head += "clean KPI  " + "  ".join(f"{k} {self.clean_kpi[k]:.4f}" for k in KPI_NAMES) + "\n"
        lines = [head, format_table(self.sweep_rows())]
        if self.detection:
            obs, var = self.detection["observation"], self.detection["variation"]
            lines.append(
                f"\nobservation MMD {obs['mmd']:.6f} p {obs['p_value']:.4f} -> {_plausible(obs)}\n"
                f"variation   MMD {var['mmd']:.6f} p {var['p_value']:.4f} -> {_plausible(var)} (below p5: {var['below_p5']})\n"
            )
        return "".join(lines)

    def write(self, reports_dir) -> None:
        d = Path(reports_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "run_report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        (d / "run_report.txt").write_text(self.table())
        rows = self.sweep_rows()
        if rows:
            buf = io.StringIO()
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
            (d / "sweep_series.csv").write_text(buf.getvalue())


def _plausible(result: dict) -> str:
    return "plausible" if result["plausible"] else "implausible"


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    out = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


class Pipeline:
    """One configured run; stages are methods so tests can drive them separately."""

    def __init__(self, config: ExperimentConfig, out=None):
        self.config = config
        self.out = Path(out or config["out"])
        self.seed = int(config["seed"])
        self.agents_dir = self.out / "agents"
        self.logs_dir = self.out / "logs"
        self.reports_dir = self.out / "reports"
        for d in (self.agents_dir, self.logs_dir, self.reports_dir):
            d.mkdir(parents=True, exist_ok=True)
        self.env = self._build_env()
        self.baseline = null_episode(self.env)
        write_logs([self.baseline], self.logs_dir / "baseline.jsonl")

    def sub_seed(self, stage: str, i: int = 0) -> int:
        return derive_seed(self.seed, stage, i)

    def _build_env(self) -> DemandResponseEnv:
        c = self.config
        if c["dataset.source"] == "file":
            return DemandResponseEnv(load_dataset(c["dataset.path"]))
        seed = c["dataset.seed"]
        if seed is None:
            seed = self.sub_seed("dataset") % 2**32
        return DemandResponseEnv(generate_synthetic(int(seed), int(c["dataset.days"])))

    # -- train -----------------------------------------------------------------------

    def _cached(self, name: str, digest: str, build):
        path = self.agents_dir / name
        manifest = path / "manifest.json"
        if manifest.is_file() and json.loads(manifest.read_text()).get("pipeline_digest") == digest:
            return PolicyAgent.load(path)
        agent = build()
        agent.manifest["pipeline_digest"] = digest
        agent.save(path)
        # reload so a fresh run and a cached run see identical parameters
        return PolicyAgent.load(path)

    def _training_digest(self, *keys) -> str:
        c = self.config.values
        body = {k: c[k] for k in c if k.startswith(("dataset.", "agent.", "atla.") + keys)}
        body["seed"] = self.seed
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def train(self) -> PolicyAgent:
        c = self.config
        if c["agent.training"] == "load":
            return PolicyAgent.load(c["agent.path"])
        space = c.action_space()
        ppo = c.ppo_config(self.sub_seed("train"))
        if c["agent.training"] == "ppo":
            build = lambda: ppo_train(self.env, ppo, space)  # noqa: E731
        else:
            bounds = category_bound(c["atla.bounds"])
            adversary = c.ppo_config(
                self.sub_seed("atla-adversary"), entropy_coef=0.0, init_log_std=c["atla.adversary_init_log_std"]
            )
            atla = AtlaConfig(bounds, int(c["atla.period"]), int(c["atla.alternations"]), adversary)
            build = lambda: atla_train(self.env, ppo, atla, space)  # noqa: E731
        return self._cached("victim", self._training_digest(), build)

    # -- attack ----------------------------------------------------------------------

    def _budget(self, eps: float) -> AttackBudget:
        if self.config["attack.preset"] == "stealthy":
            return stealthy_budget(self.env, eps)
        return AttackBudget.uniform(eps, self.env.observation_width)

    def _adversary(self, space: ActionSpace) -> PolicyAgent:
        c = self.config
        cfg = c.ppo_config(self.sub_seed("adversarial-policy"), episodes=int(c["attack.adversary_episodes"]))
        digest = self._training_digest("attack.adversary_episodes")
        return self._cached("adversarial_policy", digest, lambda: train_adversarial_policy(self.env, cfg, space))

    def _proxy(self, clean):
        space_discrete = self.victim.action_space.discrete
        proxy = train_proxy([clean], discrete=space_discrete, n_bins=self.victim.action_space.n_bins, seed=self.sub_seed("proxy"))
        info = {"score": proxy.score, "grid_scores": proxy.grid_scores, "provenance": proxy.provenance}
        (self.agents_dir / "proxy.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
        return proxy

    def make_attack(self, procedure: str, eps: float, i: int, clean=None):
        c = self.config
        budget = self._budget(eps)
        seed = self.sub_seed("attack", i)
        bif = bool(c["attack.bifurcation"])
        if procedure == "none":
            return NoAttack()
        if procedure in ("fgm", "pgd"):
            return WhiteBoxAttack(budget, procedure, c.schedule(), bif, seed)
        if procedure == "dynamic":
            base = self._budget(max(c["attack.candidates"]))
            return DynamicDistortionAttack(base, sorted(c["attack.candidates"]), c["attack.method"], c.schedule(), bif, seed)
        if procedure == "targeted":
            return TargetedAttack(self._adversary(self.victim.action_space), budget, c.schedule())
        if procedure == "random":
            return RandomNoiseAttack(budget, seed)
        if self._proxy_model is None:
            self._proxy_model = self._proxy(clean)
        return SnoopingAttack(self._proxy_model, budget, bif, seed)

    def attack(self, procedure: str | None = None) -> list[dict]:
        procedure = procedure or self.config["attack.procedure"]
        self._proxy_model = None
        runs = []
        self.episodes = {}
        for i, eps in enumerate(self.config.epsilons()):
            clean = self.clean_log
            attack = self.make_attack(procedure, eps, i, clean)
            meta = {"procedure": procedure, "epsilon": eps, "seed": self.seed}
            _, adv, outcomes = closed_loop_attack(self.env, self.victim, attack, meta)
            tag = f"{procedure}_eps{eps:g}"
            write_logs([adv], self.logs_dir / f"attack_{tag}.jsonl")
            write_outcomes(outcomes, self.logs_dir / f"outcomes_{tag}.jsonl")
            # metrics are recomputed from the persisted logs
            adv = read_logs(self.logs_dir / f"attack_{tag}.jsonl")[0]
            metrics = attack_metrics(self.clean_log, adv, outcomes, self.baseline, self.victim.action_space)
            metrics.pop("mean_distortion")
            runs.append(dict(procedure=procedure, epsilon=eps, bifurcation=bool(self.config["attack.bifurcation"]), **metrics))
            self.episodes[tag] = adv
        return runs

    # -- detect ----------------------------------------------------------------------

    def detect(self, adversarial) -> dict:
        c = self.config
        report = detect_episode(
            self.clean_log.observations,
            adversarial.perceived,
            int(c["detect.pairs"]),
            int(c["detect.bootstraps"]),
            self.sub_seed("detect") % 2**32,
        )
        report.write(self.reports_dir / "detection.json")
        return report.to_dict()

    # -- whole run -------------------------------------------------------------------

    def run(self, stages=STAGES, procedure: str | None = None) -> RunReport:
        stage = "train"
        try:
            self.victim = self.train()
            clean = self._clean_episode()
            self.clean_log = clean
            runs, detection = [], None
            if "attack" in stages:
                stage = "attack"
                runs = self.attack(procedure)
            if "detect" in stages and runs:
                stage = "detect"
                last = list(self.episodes.values())[-1]
                detection = self.detect(last)
            stage = "report"
            ck = compute_kpis(read_logs(self.logs_dir / "clean.jsonl")[0], self.baseline)
            report = RunReport(
                config_hash=self.config.digest(),
                version=PACKAGE_VERSION,
                seed=self.seed,
                agent={
                    "action_space": self.victim.action_space.kind,
                    "training": self.config["agent.training"],
                    "config_hash": self.victim.manifest.get("config_hash"),
                },
                clean_kpi={k: getattr(ck, k) for k in KPI_NAMES},
                runs=runs,
                detection=detection,
            )
            report.write(self.reports_dir)
            (self.out / "config.cfg").write_text(self.config.to_text())
            return report
        except ConfigError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc

    def _clean_episode(self):
        clean = run_episode(self.env, lambda o: self.victim.decide(o)[0], {"attack": "none", "seed": self.seed})
        write_logs([clean], self.logs_dir / "clean.jsonl")
        return read_logs(self.logs_dir / "clean.jsonl")[0]


def run_pipeline(config: ExperimentConfig, out=None, stages=None, procedure: str | None = None) -> RunReport:
    """Run the configured stages in order; deterministic given the config and master seed."""
    if stages is None:
        stages = ["train", "attack", "report"]
        if config["detect.enabled"]:
            stages.insert(2, "detect")
    return Pipeline(config, out).run(stages, procedure)


def _sweep_one(args):
    values, out, seed = args
    config = ExperimentConfig(dict(values, seed=seed))
    return run_pipeline(config, out).to_dict()


def run_sweep(config: ExperimentConfig, out=None) -> list[dict]:
    """Run the epsilon sweep for every seed in ``sweep.seeds`` (or the master seed).

    Seeds run as independent processes when ``sweep.workers > 1``; each seed
    writes to ``<out>/seed_<n>/``.
    """
    out = Path(out or config["out"])
    seeds = [int(s) for s in config["sweep.seeds"]] or [int(config["seed"])]
    jobs = [(copy.deepcopy(config.values), out / f"seed_{s}", s) for s in seeds]
    workers = int(config["sweep.workers"])
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_sweep_one, jobs))
    else:
        reports = [_sweep_one(j) for j in jobs]
    aggregate_reports(out)
    return reports


def find_reports(directory) -> list[Path]:
    return sorted(p for p in Path(directory).rglob("run_report.json") if p.is_file())


def aggregate_reports(directory) -> str:
    """Combine every run report below ``directory`` into one comparison table."""
    directory = Path(directory)
    rows = []
    for path in find_reports(directory):
        data = json.loads(path.read_text())
        if data.get("kind") != "run_report":
            continue
        run_dir = str(path.parent.parent.relative_to(directory)) if path.parent.parent != directory else "."
        base = {"run": run_dir, "seed": data["seed"], "agent": data["agent"]["action_space"], "training": data["agent"]["training"]}
        base["clean_consumption"] = data["clean_kpi"]["electricity_consumption"]
        if not data["runs"]:
            rows.append(base)
        for r in data["runs"]:
            rows.append(
                dict(
                    base,
                    procedure=r["procedure"],
                    bifurcation=r["bifurcation"],
                    epsilon=r["epsilon"],
                    asr=r["asr"],
                    reversal=r["reversal"],
                    attacked_consumption=r["attacked_kpi"]["electricity_consumption"],
                    regret_consumption=r["regret"]["electricity_consumption"],
                )
            )
    if not rows:
        raise ConfigError(f"no run reports found under {directory}")
    cols = list(dict.fromkeys(k for r in rows for k in r))
    rows = [{c: r.get(c) for c in cols} for r in rows]
    table = format_table(rows)
    reports = directory / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "comparison.txt").write_text(table)
    (reports / "comparison.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return table


def recompute_regret(run_dir, tag: str) -> dict:
    """Regret per KPI recomputed from the persisted logs of one attacked episode."""
    logs = Path(run_dir) / "logs"
    base = read_logs(logs / "baseline.jsonl")[0]
    clean = compute_kpis(read_logs(logs / "clean.jsonl")[0], base)
    adv = compute_kpis(read_logs(logs / f"attack_{tag}.jsonl")[0], base)
    return {k: getattr(adv, k) - getattr(clean, k) for k in KPI_NAMES}


def seeds_for(master: int, stage: str, count: int) -> list[int]:
    return [derive_seed(master, stage, i) for i in range(count)]
