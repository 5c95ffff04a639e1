"""Acceptance criteria 1-12 on desk-scale synthetic data.

Each test records one pass/fail line (printed in the terminal summary)
before asserting. Agents are trained once per session from seeds derived
from ``MASTER_SEED``.
"""

from functools import lru_cache

import numpy as np
import pytest

from helpers import BUDGET_CHECKS, assert_budget_sound, majority, record
from loadattack.agents import ActionSpace, AtlaConfig, PpoConfig, atla_train, category_bound, ppo_train, train_adversarial_policy
from loadattack.attacks import (
    AttackBudget,
    BifurcationMode,
    DynamicDistortionAttack,
    PgdSchedule,
    RandomNoiseAttack,
    SnoopingAttack,
    TargetedAttack,
    WhiteBoxAttack,
    attack_metrics,
    bifurcate,
    closed_loop_attack,
    default_loss,
    pgd_decaying,
    stealthy_budget,
    train_proxy,
)
from loadattack.detect import bootstrap_p_value, clean_baseline, detect_episode, month_split, parity_split
from loadattack.env import DemandResponseEnv, generate_synthetic, null_episode, run_episode
from loadattack.harness import ExperimentConfig, derive_seed, run_pipeline
from loadattack.nn import DenseNetwork, Layer, LossSpec, TargetGroup, input_gradient, loss_value
from oracles import best_corner, central_difference, relative_error
from test_nn import near_kink, parameter_fd_error, random_triple

MASTER_SEED = 0
SEEDS = [derive_seed(MASTER_SEED, "acceptance", i) % 2**32 for i in range(5)]
UNIFORM_EPS = 0.05
SWEEP = (0.01, 0.04, 0.07, 0.10, 0.13)
SNOOP_EPS = 0.13
LARGE_EPS = 0.5
SPACES = {"discrete": ActionSpace("discrete", 20), "continuous": ActionSpace("continuous")}


# -- shared desk-scale fixtures ---------------------------------------------------------


class Desk:
    """Lazily trained agents, proxies and clean logs on one dataset."""

    def __init__(self, days: int):
        self.env = DemandResponseEnv(generate_synthetic(0, days))
        self.baseline = null_episode(self.env)

    @lru_cache(maxsize=None)
    def agent(self, kind: str, seed: int):
        return ppo_train(self.env, PpoConfig.desk(seed=seed), SPACES[kind])

    @lru_cache(maxsize=None)
    def adversarial_policy(self, kind: str, seed: int):
        return train_adversarial_policy(self.env, PpoConfig.desk(seed=derive_seed(seed, "adversarial-policy") % 2**32), SPACES[kind])

    @lru_cache(maxsize=None)
    def atla_agent(self, seed: int):
        atla = AtlaConfig(category_bound())
        return atla_train(self.env, PpoConfig.desk(seed=seed), atla, SPACES["discrete"])

    @lru_cache(maxsize=None)
    def clean(self, kind: str, seed: int):
        agent = self.agent(kind, seed)
        return run_episode(self.env, lambda o: agent.decide(o)[0])

    @lru_cache(maxsize=None)
    def proxy(self, kind: str, seed: int):
        return train_proxy([self.clean(kind, seed)], discrete=kind == "discrete", seed=seed)

    def run(self, agent, attack, budget):
        clean, adv, outs = closed_loop_attack(self.env, agent, attack)
        assert_budget_sound(outs, budget)
        m = attack_metrics(clean, adv, outs, self.baseline, agent.action_space)
        m["logs"] = (clean, adv)
        return m


@pytest.fixture(scope="module")
def desk():
    return Desk(30)


@pytest.fixture(scope="module")
def long_desk():
    return Desk(90)


def regret(m):
    return m["regret"]["electricity_consumption"]


def fmt(values):
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


# -- 1-3: exact properties ---------------------------------------------------------------


def test_c01_gradient_correctness():
    rng = np.random.default_rng(MASTER_SEED)
    worst, checked = 0.0, 0
    while checked < 100:
        net, x, spec = random_triple(rng)
        if near_kink(net, x):
            continue
        g = input_gradient(net, x, spec)
        fd = central_difference(lambda v: loss_value(net, v, spec), x)
        worst = max(worst, relative_error(g, fd), parameter_fd_error(net, x[None, :], spec))
        checked += 1
    ok = record(1, worst < 1e-4, f"100 random nets, worst relative error {worst:.2e} (tolerance 1e-4)")
    assert ok


def test_c02_gdl_equivalence():
    rng = np.random.default_rng(MASTER_SEED + 1)
    mismatches = 0
    for _ in range(1000):
        n = 2 * int(rng.integers(1, 11))
        net = DenseNetwork.initialize([6, int(rng.integers(2, 16)), n], rng)
        for layer in net.layers:
            layer.bias[:] = rng.normal(size=layer.bias.shape)
        x = rng.uniform(size=6)
        perm = rng.permutation(n)
        k = int(rng.integers(1, n))
        charge, discharge = sorted(perm[:k]), sorted(perm[k:])
        y = int(np.argmax(net.forward(x)))
        other = discharge if y in charge else charge
        dl = loss_value(bifurcate(net, BifurcationMode.groups(charge, discharge)), x, LossSpec("dl", label=0 if y in charge else 1))
        gdl = loss_value(net, x, LossSpec("gdl", label=y, group=TargetGroup(other)))
        mismatches += dl != gdl
    ok = record(2, mismatches == 0, f"1000 random discrete nets, {mismatches} inexact matches")
    assert ok


def test_c03_pgd_fidelity():
    rng = np.random.default_rng(MASTER_SEED + 2)
    schedule = PgdSchedule()
    misses = 0
    for d in range(1, 13):
        w = rng.choice([-1.0, 1.0], size=d) * rng.uniform(0.1, 2.0, size=d)
        net = DenseNetwork([Layer(w[None, :], np.zeros(1))])
        x = rng.uniform(0.1, 0.9, size=d)
        eps = np.full(d, UNIFORM_EPS)
        out = pgd_decaying(net, x, AttackBudget(eps), schedule, default_loss(net, x, net.forward(x) - 1.0))
        corner, _ = best_corner(lambda v: float(w @ v), x, eps)
        misses += not np.allclose(out.delta, corner, atol=1e-12)
    final = out.info["final_stepsize"]
    ok = misses == 0 and schedule.decay_period == 25 and final == 6.25e-4
    record(3, ok, f"corner misses {misses}/12, k_alpha {schedule.decay_period}, final stepsize {final:g}")
    assert ok


# -- 5-7: white-box orderings ----------------------------------------------------------------


def test_c05_bifurcation_dominance(desk):
    budget = AttackBudget.uniform(UNIFORM_EPS)
    rows = {k: [] for k in ("c_bif", "c_dir", "c_rev_bif", "c_rev_dir", "d_rev_bif", "d_rev_dir")}
    for seed in SEEDS:
        for kind in ("continuous", "discrete"):
            agent = desk.agent(kind, seed)
            bif = desk.run(agent, WhiteBoxAttack(budget, bifurcation=True), budget)
            direct = desk.run(agent, WhiteBoxAttack(budget, seed=seed), budget)
            k = kind[0]
            rows[f"{k}_rev_bif"].append(bif["reversal"])
            rows[f"{k}_rev_dir"].append(direct["reversal"])
            if kind == "continuous":
                rows["c_bif"].append(regret(bif))
                rows["c_dir"].append(regret(direct))
    regret_ok = majority(b > d for b, d in zip(rows["c_bif"], rows["c_dir"]))
    rev_c = majority(b > d for b, d in zip(rows["c_rev_bif"], rows["c_rev_dir"]))
    rev_d = majority(b > d for b, d in zip(rows["d_rev_bif"], rows["d_rev_dir"]))
    detail = (
        f"continuous regret bif {fmt(rows['c_bif'])} vs direct {fmt(rows['c_dir'])}; "
        f"reversal continuous {fmt(rows['c_rev_bif'])} vs {fmt(rows['c_rev_dir'])}; "
        f"discrete {fmt(rows['d_rev_bif'])} vs {fmt(rows['d_rev_dir'])}"
    )
    ok = record(5, regret_ok and rev_c and rev_d, detail)
    assert ok


def test_c06_action_space_robustness(desk):
    stealthy = {"discrete": [], "continuous": []}
    sweep = {eps: {"discrete": [], "continuous": []} for eps in SWEEP}
    for seed in SEEDS:
        for kind in ("discrete", "continuous"):
            agent = desk.agent(kind, seed)
            budget = stealthy_budget(desk.env)
            stealthy[kind].append(regret(desk.run(agent, WhiteBoxAttack(budget, bifurcation=True), budget)))
            proxy = desk.proxy(kind, seed)
            for eps in SWEEP:
                b = AttackBudget.uniform(eps)
                sweep[eps][kind].append(regret(desk.run(agent, SnoopingAttack(proxy, b, bifurcation=True), b)))
    stealthy_ok = majority(d < c for d, c in zip(stealthy["discrete"], stealthy["continuous"]))
    per_eps = {eps: majority(d < c for d, c in zip(v["discrete"], v["continuous"])) for eps, v in sweep.items()}
    detail = f"stealthy regret discrete {fmt(stealthy['discrete'])} vs continuous {fmt(stealthy['continuous'])}; " + "; ".join(
        f"eps {eps:g}: {'ok' if per_eps[eps] else 'reversed'} (d {np.median(sweep[eps]['discrete']):.3f} / c {np.median(sweep[eps]['continuous']):.3f})"
        for eps in SWEEP
    )
    for eps in (e for e in SWEEP if not per_eps[e]):
        detail += f"; per seed at eps {eps:g}: discrete {fmt(sweep[eps]['discrete'])} vs continuous {fmt(sweep[eps]['continuous'])}"
    ok = record(6, stealthy_ok and all(per_eps.values()), detail)
    assert ok


def test_c07_targeted_supremacy(desk):
    budget = AttackBudget.uniform(LARGE_EPS)
    schedule = PgdSchedule(stepsize=LARGE_EPS / 5)
    verdicts, parts = [], []
    for kind in ("continuous", "discrete"):
        wins, kpis, margins = [], [], []
        for seed in SEEDS:
            agent = desk.agent(kind, seed)
            proxy = desk.proxy(kind, seed)
            targeted = desk.run(agent, TargetedAttack(desk.adversarial_policy(kind, seed), budget, schedule), budget)
            untargeted = [
                desk.run(agent, WhiteBoxAttack(budget, "pgd", schedule, True), budget),
                desk.run(agent, WhiteBoxAttack(budget, "pgd", schedule, False, seed), budget),
                desk.run(agent, WhiteBoxAttack(budget, "fgm", bifurcation=True), budget),
                desk.run(agent, SnoopingAttack(proxy, budget, bifurcation=True), budget),
                desk.run(agent, RandomNoiseAttack(budget, seed), budget),
            ]
            best = max(regret(m) for m in untargeted)
            wins.append(regret(targeted) > best)
            kpis.append(targeted["attacked_kpi"]["electricity_consumption"])
            margins.append(regret(targeted) - best)
        kind_ok = majority(wins) and majority(k > 1.0 for k in kpis)
        verdicts.append(kind_ok)
        parts.append(f"{kind}: {'ok' if kind_ok else 'fails'} margin {fmt(margins)} targeted KPI {fmt(kpis)}")
    ok = record(7, all(verdicts), f"eps {LARGE_EPS}; " + "; ".join(parts))
    assert ok


# -- 8-9: detection --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def detection_agent(long_desk):
    return long_desk.agent("continuous", SEEDS[0])


def test_c08_detection_dichotomy(long_desk, detection_agent, bootstraps):
    env = long_desk.env
    seed = derive_seed(MASTER_SEED, "detect") % 2**32
    clean = long_desk.clean("continuous", SEEDS[0])
    big = AttackBudget.uniform(0.2)
    fgm_run = long_desk.run(detection_agent, WhiteBoxAttack(big, "fgm", bifurcation=True), big)
    stealthy = stealthy_budget(env)
    stealthy_run = long_desk.run(detection_agent, WhiteBoxAttack(stealthy, bifurcation=True), stealthy)

    loud = detect_episode(clean.observations, fgm_run["logs"][1].perceived, 100, bootstraps, seed)
    quiet = detect_episode(clean.observations, stealthy_run["logs"][1].perceived, 100, bootstraps, seed)
    above = quiet.baseline["p_above_005"]
    a = above >= 90
    b = loud.observation["mmd"] > loud.baseline["mmd_max"]
    c = quiet.observation["plausible"] and quiet.variation["below_p5"]
    detail = (
        f"(a) {above}/100 clean pairs p>0.05; "
        f"(b) FGM 0.2 MMD {loud.observation['mmd']:.4f} vs baseline max {loud.baseline['mmd_max']:.4f}; "
        f"(c) stealthy observation p {quiet.observation['p_value']:.3f} plausible={quiet.observation['plausible']}, "
        f"variation p {quiet.variation['p_value']:.3f} vs p5 {quiet.variation_baseline['p_p5']:.3f}; "
        f"{bootstraps} bootstraps"
    )
    ok = record(8, a and b and c, detail)
    assert ok


def test_c09_negative_controls(long_desk, bootstraps):
    obs = long_desk.clean("continuous", SEEDS[0]).observations
    months = long_desk.env.dataset.column("month")
    seed = derive_seed(MASTER_SEED, "controls") % 2**32
    month = bootstrap_p_value(*month_split(obs, months), bootstraps, seed)
    parity = bootstrap_p_value(*parity_split(obs), bootstraps, seed + 1)
    base = clean_baseline(obs, 100, bootstraps, derive_seed(MASTER_SEED, "detect") % 2**32)
    above = int(np.sum(base.p_values > 0.05))
    ok = month.p_value < 0.05 and parity.p_value < 0.05 and above >= 90
    detail = f"month split p {month.p_value:.4f}, even/odd hours p {parity.p_value:.4f}, day-stratified {above}/100 p>0.05"
    record(9, ok, detail)
    assert ok


# -- 10-11: black-box ------------------------------------------------------------------------


def test_c10_snooping_efficacy(desk):
    budget = AttackBudget.uniform(SNOOP_EPS)
    wide = AttackBudget.uniform(10 * SNOOP_EPS)
    ordered, matched, rows = [], [], []
    for seed in SEEDS:
        agent = desk.agent("discrete", seed)
        proxy = desk.proxy("discrete", seed)
        bif = desk.run(agent, SnoopingAttack(proxy, budget, bifurcation=True), budget)
        direct = desk.run(agent, SnoopingAttack(proxy, budget, bifurcation=False, seed=seed), budget)
        noise = desk.run(agent, RandomNoiseAttack(budget, seed), budget)
        noise10 = desk.run(agent, RandomNoiseAttack(wide, seed), wide)
        ordered.append(regret(bif) > regret(direct) > regret(noise))
        matched.append(noise["asr"] < bif["asr"] / 2 <= noise10["asr"])
        rows.append(f"{regret(bif):.3f}>{regret(direct):.3f}>{regret(noise):.3f} asr {bif['asr']:.2f}/{noise['asr']:.2f}/{noise10['asr']:.2f}")
    ok = record(10, majority(ordered) and majority(matched), f"eps {SNOOP_EPS}, bif>direct>random regret and ASR snoop/random/random10x: " + "; ".join(rows))
    assert ok


@pytest.mark.slow
def test_c11_atla_effect(desk):
    budget = AttackBudget.uniform(SNOOP_EPS)
    wins, rows = [], []
    for seed in SEEDS:
        results = []
        for agent in (desk.agent("discrete", seed), desk.atla_agent(seed)):
            clean = run_episode(desk.env, lambda o: agent.decide(o)[0])
            proxy = train_proxy([clean], discrete=True, seed=seed)
            results.append(desk.run(agent, SnoopingAttack(proxy, budget, bifurcation=True), budget))
        conv, atla = results
        ck, ak = conv["clean_kpi"]["electricity_consumption"], atla["clean_kpi"]["electricity_consumption"]
        wins.append(regret(atla) < regret(conv) and ak >= ck)
        rows.append(f"regret {regret(atla):.3f} vs {regret(conv):.3f}, clean {ak:.3f} vs {ck:.3f}")
    ok = record(11, majority(wins), "ATLA vs conventional (bifurcated snooping eps 0.13): " + "; ".join(rows))
    assert ok


# -- 12 and 4 --------------------------------------------------------------------------------


def test_c12_determinism(tmp_path):
    text = """
dataset.days = 7
agent.episodes = 5
attack.procedure = snoop
attack.bifurcation = true
attack.epsilons = [0.05, 0.1]
detect.enabled = true
detect.pairs = 10
detect.bootstraps = 200
"""
    config = ExperimentConfig.from_text(text).with_overrides(seed=MASTER_SEED)
    trees = []
    for name in ("first", "second"):
        run_pipeline(config, tmp_path / name)
        root = tmp_path / name
        trees.append({p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.suffix in (".jsonl", ".json", ".txt", ".csv")})
    same = trees[0] == trees[1]
    ok = record(12, same and len(trees[0]) > 5, f"{len(trees[0])} log and report files compared byte for byte")
    assert ok


def test_c04_budget_soundness(desk):
    # runs last: every closed-loop run above went through assert_budget_sound
    agent = desk.agent("continuous", SEEDS[0])
    masked = AttackBudget.uniform(0.1, masked=["hour", "month", "solar_generation"])
    for attack in (
        WhiteBoxAttack(masked, "fgm"),
        DynamicDistortionAttack(masked, [0.02, 0.05, 0.1], bifurcation=True),
        TargetedAttack(desk.agent("discrete", SEEDS[0]), masked),
        RandomNoiseAttack(masked),
    ):
        desk.run(agent, attack, masked)
    ok = record(4, True, f"{BUDGET_CHECKS['runs']} closed-loop runs, {BUDGET_CHECKS['steps']} perturbed steps within budget and box, masked deltas exactly 0")
    assert ok
