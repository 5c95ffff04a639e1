"""Observation-perturbation attacks on policy networks.

All attacks work in normalized observation space under a per-feature L-inf
budget intersected with a valid-range box. The bifurcation wrapper reduces a
policy's outputs to two logits so that a plain difference-logit loss acts as a
grouped one: for a discrete actor the pair is (best charge logit, best
discharge logit); for a scalar continuous output ``y`` it is ``(y, -y)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agents import ActionSpace, PolicyAgent, perturb
from .env import (
    CATEGORIES,
    KPI_NAMES,
    OBSERVATION_FEATURES,
    DemandResponseEnv,
    EpisodeLog,
    compute_kpis,
    run_episode,
)
from .nn import Adam, DenseNetwork, LossSpec, StructureError, input_gradient, loss_and_grad, parameter_gradient

CONTINUOUS_ASR_THRESHOLD = 0.01
TARGET_TOLERANCE = 0.05


# -- budgets and schedules -------------------------------------------------------


@dataclass
class AttackBudget:
    epsilon: np.ndarray
    low: np.ndarray | None = None
    high: np.ndarray | None = None

    def __post_init__(self):
        self.epsilon = np.asarray(self.epsilon, dtype=np.float64).copy()
        n = len(self.epsilon)
        self.low = np.zeros(n) if self.low is None else np.asarray(self.low, dtype=np.float64)
        self.high = np.ones(n) if self.high is None else np.asarray(self.high, dtype=np.float64)
        if np.any(self.epsilon < 0) or not np.all(np.isfinite(self.epsilon)):
            raise ValueError("epsilon must be finite and non-negative")
        if np.any(self.low > self.high):
            raise ValueError("valid box has low > high")

    @classmethod
    def uniform(cls, eps: float, width: int = len(OBSERVATION_FEATURES), masked: Sequence[str] = (), features=OBSERVATION_FEATURES):
        e = np.full(width, float(eps))
        for name in masked:
            e[features.index(name)] = 0.0
        return cls(e)

    def scaled(self, factor: float) -> "AttackBudget":
        return AttackBudget(self.epsilon * factor, self.low, self.high)

    @property
    def masked(self) -> np.ndarray:
        return self.epsilon == 0

    def project(self, x, candidate) -> np.ndarray:
        """Closest point to ``candidate`` inside the eps-box around ``x`` and the valid box.

        The result satisfies ``abs(result - x) <= epsilon`` as evaluated in
        floating point, not just in exact arithmetic.
        """
        x = np.asarray(x, dtype=np.float64)
        d = np.clip(np.asarray(candidate) - x, -self.epsilon, self.epsilon)
        adv = np.clip(x + d, self.low, self.high)
        for _ in range(8):
            over = np.abs(adv - x) > self.epsilon
            if not over.any():
                break
            adv[over] = np.nextafter(adv[over], x[over])
        adv[self.masked] = x[self.masked]
        return adv

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon.tolist(), "low": self.low.tolist(), "high": self.high.tolist()}


def stealthy_budget(env: DemandResponseEnv, eps: float = 0.03) -> AttackBudget:
    """Small uniform budget with temporal and solar-generation features frozen.

    Net consumption gets ``eps`` times the spread that feature shows over the
    no-battery episode, in the units the agent observes.
    """
    masked = CATEGORIES["temporal"] + CATEGORIES["solar_generation"]
    budget = AttackBudget.uniform(eps, masked=masked)
    i = OBSERVATION_FEATURES.index("net_electricity_consumption")
    observed_spread = np.ptp(env.baseline_net) / env.normalizer.spread[i]
    budget.epsilon[i] = eps * float(observed_spread)
    return budget


@dataclass(frozen=True)
class PgdSchedule:
    stepsize: float = 0.01
    iterations: int = 100
    decays: int = 4
    rate: float = 0.5

    def __post_init__(self):
        if not self.stepsize > 0 or self.iterations < 1:
            raise ValueError("stepsize must be positive and iterations >= 1")
        if not 1 <= self.decays <= self.iterations:
            raise ValueError("number of decays must be in [1, iterations]")
        if not 0 < self.rate <= 1:
            raise ValueError("decay rate must be in (0, 1]")

    @property
    def decay_period(self) -> int:
        return self.iterations // self.decays


# -- bifurcation -----------------------------------------------------------------


@dataclass(frozen=True)
class BifurcationMode:
    kind: str = "none"  # none | groups | negation
    charge: tuple = ()
    discharge: tuple = ()

    @classmethod
    def groups(cls, charge, discharge):
        return cls("groups", tuple(int(i) for i in charge), tuple(int(i) for i in discharge))

    @classmethod
    def negation(cls):
        return cls("negation")

    @classmethod
    def for_space(cls, space: ActionSpace):
        if space.discrete:
            return cls.groups(space.charge_bins, space.discharge_bins)
        return cls.negation()

    def validate(self, output_width: int) -> None:
        if self.kind == "groups":
            c, d = set(self.charge), set(self.discharge)
            if not c or not d or c & d or c | d != set(range(output_width)):
                raise StructureError("charge/discharge groups must be disjoint, non-empty and cover all outputs")
        elif self.kind == "negation":
            if output_width != 1:
                raise StructureError("negation bifurcation needs a single output")
        elif self.kind != "none":
            raise StructureError(f"unknown bifurcation {self.kind!r}")


class BifurcatedNetwork:
    """Two-logit view of a network; differentiable like a DenseNetwork."""

    output_width = 2

    def __init__(self, net, mode: BifurcationMode):
        mode.validate(net.output_width)
        if mode.kind == "none":
            raise StructureError("nothing to bifurcate")
        self.net = net
        self.mode = mode
        self.input_width = net.input_width
        self._charge = np.array(mode.charge)
        self._discharge = np.array(mode.discharge)

    def _pick(self, z):
        ic = self._charge[np.argmax(z[..., self._charge], axis=-1)]
        idis = self._discharge[np.argmax(z[..., self._discharge], axis=-1)]
        return ic, idis

    def forward(self, x):
        z = self.net.forward(x)
        if self.mode.kind == "negation":
            return np.concatenate([z, -z], axis=-1)
        return np.stack([z[..., self._charge].max(axis=-1), z[..., self._discharge].max(axis=-1)], axis=-1)

    __call__ = forward

    def vjp(self, x, grad_out):
        g = np.asarray(grad_out, dtype=np.float64)
        if self.mode.kind == "negation":
            return self.net.vjp(x, g[..., :1] - g[..., 1:])
        z = self.net.forward(x)
        gz = np.zeros_like(z)
        ic, idis = self._pick(z)
        if z.ndim == 1:
            gz[ic] += g[0]
            gz[idis] += g[1]
        else:
            rows = np.arange(len(z))
            gz[rows, ic] += g[:, 0]
            gz[rows, idis] += g[:, 1]
        return self.net.vjp(x, gz)


def bifurcate(net, mode: BifurcationMode):
    """Wrap ``net`` so its output is a charge/discharge logit pair."""
    return net if mode.kind == "none" else BifurcatedNetwork(net, mode)


# -- single-input attacks --------------------------------------------------------


@dataclass
class AttackOutcome:
    x: np.ndarray
    adversarial: np.ndarray
    original_output: np.ndarray
    adversarial_output: np.ndarray
    success: bool
    original_action: float | None = None
    adversarial_action: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def delta(self) -> np.ndarray:
        return self.adversarial - self.x

    @property
    def distortion(self) -> np.ndarray:
        return np.abs(self.delta)

    def record(self) -> dict:
        d = self.delta
        return {
            "delta": d.tolist(),
            "original_action": self.original_action,
            "adversarial_action": self.adversarial_action,
            "success": bool(self.success),
            "linf": float(np.max(np.abs(d))) if len(d) else 0.0,
            "l2": float(np.linalg.norm(d)),
        }


def output_changed(before, after) -> bool:
    """Default success predicate: a new argmax, or a scalar moved beyond the ASR threshold."""
    before, after = np.atleast_1d(before), np.atleast_1d(after)
    if before.size >= 2:
        return int(np.argmax(before)) != int(np.argmax(after))
    return bool(abs(float(after[0] - before[0])) > CONTINUOUS_ASR_THRESHOLD)


def _outcome(net, x, adv, success_fn, info=None):
    before = net.forward(x)
    after = net.forward(adv)
    return AttackOutcome(np.asarray(x, dtype=np.float64), adv, before, after, bool(success_fn(before, after)), info=info or {})


def _ascent_direction(net, x, spec):
    return np.sign(spec.ascent_sign * input_gradient(net, x, spec))


def default_loss(net, x, reference=None) -> LossSpec:
    """Untargeted loss: DL against the current label, or squared error away from a reference.

    The scalar reference defaults to the current output, where the gradient
    vanishes; callers attacking a stochastic policy pass the sampled
    prediction instead (see :func:`sampled_reference`).
    """
    y = net.forward(x)
    if net.output_width >= 2:
        return LossSpec("dl", direction="away", label=int(np.argmax(y)))
    return LossSpec("mse", direction="away", reference=y if reference is None else np.atleast_1d(reference))


def sampled_reference(agent: PolicyAgent, x, rng) -> np.ndarray:
    """Pre-squash action drawn from the agent's policy distribution at ``x``."""
    _, u, _ = agent.sample(x, rng)
    return np.atleast_1d(np.asarray(u, dtype=np.float64))


def fgm(net, x, budget: AttackBudget, spec: LossSpec | None = None, success_fn=output_changed) -> AttackOutcome:
    """One signed-gradient step of size eps, then projection."""
    x = np.asarray(x, dtype=np.float64)
    spec = spec or default_loss(net, x)
    step = _ascent_direction(net, x, spec)
    adv = budget.project(x, x + budget.epsilon * step)
    out = _outcome(net, x, adv, success_fn)
    if not np.any(step):
        out.success = False
    return out


def pgd_decaying(net, x, budget: AttackBudget, schedule: PgdSchedule = PgdSchedule(), spec: LossSpec | None = None, success_fn=output_changed) -> AttackOutcome:
    """Projected signed-gradient ascent whose stepsize decays every ``iterations // decays`` steps."""
    x = np.asarray(x, dtype=np.float64)
    spec = spec or default_loss(net, x)
    eta = schedule.stepsize
    period = schedule.decay_period
    adv = x.copy()
    active = np.any(budget.epsilon > 0)
    for k in range(1, schedule.iterations + 1):
        if active:
            s = _ascent_direction(net, adv, spec)
            adv = budget.project(x, adv + eta * s)
        if k % period == 0:
            eta *= schedule.rate
    return _outcome(net, x, adv, success_fn, {"final_stepsize": eta})


def dynamic_distortion(attack: Callable[[float], AttackOutcome], candidates: Sequence[float]):
    """Binary search for the smallest candidate eps whose attack succeeds.

    Returns ``(eps, outcome, calls)``; ``eps`` is None on failure, in which
    case ``outcome`` comes from the largest candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise StructureError("empty candidate list")
    if any(b < a for a, b in zip(candidates, candidates[1:])):
        raise StructureError("candidates must be sorted ascending")
    lo, hi = 0, len(candidates) - 1
    best = None
    last = None
    calls = 0
    while lo <= hi:
        mid = (lo + hi) // 2
        out = attack(candidates[mid])
        calls += 1
        if out.success:
            best = (candidates[mid], out)
            hi = mid - 1
        else:
            last = out
            lo = mid + 1
    if best is None:
        return None, last, calls
    return best[0], best[1], calls


def targeted_attack(net, x, target, budget: AttackBudget, schedule: PgdSchedule = PgdSchedule(), continuous: bool = False) -> AttackOutcome:
    """Decaying-stepsize PGD toward a target bin (cross-entropy) or target action (squared error).

    Returns the first iterate that reaches the target, or else the iterate
    whose decision lies closest to it, so an unreachable target still yields
    the nearest inducible action.
    """
    x = np.asarray(x, dtype=np.float64)
    if continuous:
        t = float(np.clip(target, -1.0, 1.0))
        spec = LossSpec("mse", direction="toward", reference=np.array([np.arctanh(np.clip(t, -0.999999, 0.999999))]))

        def gap(out):
            return abs(float(np.tanh(out[0])) - t)

        def reached(out):
            return gap(out) <= TARGET_TOLERANCE
    else:
        t = int(target)
        spec = LossSpec("cross_entropy", direction="toward", label=t)

        def gap(out):
            return abs(int(np.argmax(out)) - t)

        def reached(out):
            return int(np.argmax(out)) == t

    eta = schedule.stepsize
    period = schedule.decay_period
    adv = x.copy()
    best, best_gap = adv, gap(net.forward(x))
    k = 0
    if np.any(budget.epsilon > 0) and not reached(net.forward(x)):
        for k in range(1, schedule.iterations + 1):
            adv = budget.project(x, adv + eta * _ascent_direction(net, adv, spec))
            out = net.forward(adv)
            if gap(out) < best_gap:
                best, best_gap = adv, gap(out)
            if reached(out):
                break
            if k % period == 0:
                eta *= schedule.rate
    return _outcome(net, x, best, lambda before, after: reached(after), {"iterations": k})


# -- attack procedures used inside episodes -------------------------------------


def _agent_outcome(agent: PolicyAgent, out: AttackOutcome) -> AttackOutcome:
    out.original_action = agent.decide(out.x)[0]
    out.adversarial_action = agent.decide(out.adversarial)[0]
    out.success = action_changed(agent.action_space, out.original_action, out.adversarial_action)
    return out


def action_changed(space: ActionSpace, a, b) -> bool:
    if space.discrete:
        return int(space.nearest_bin(a)) != int(space.nearest_bin(b))
    return abs(a - b) > CONTINUOUS_ASR_THRESHOLD


def _white_box(agent, x, budget, method, schedule, bifurcation, rng):
    net = agent.policy_network()
    if bifurcation:
        net = bifurcate(net, BifurcationMode.for_space(agent.action_space))
        spec = None
    elif agent.action_space.discrete:
        spec = None
    else:
        spec = default_loss(net, x, sampled_reference(agent, x, rng))
    if method == "fgm":
        out = fgm(net, x, budget, spec)
    elif method == "pgd":
        out = pgd_decaying(net, x, budget, schedule, spec)
    else:
        raise ValueError(f"unknown attack method {method!r}")
    return _agent_outcome(agent, out)


@dataclass
class WhiteBoxAttack:
    """PGD or FGM against the victim's own policy network.

    Without bifurcation a continuous policy is attacked with squared error
    away from a sampled prediction; ``seed`` drives those samples.
    """

    budget: AttackBudget
    method: str = "pgd"
    schedule: PgdSchedule = PgdSchedule()
    bifurcation: bool = False
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, agent: PolicyAgent, x) -> AttackOutcome:
        return _white_box(agent, x, self.budget, self.method, self.schedule, self.bifurcation, self.rng)


@dataclass
class DynamicDistortionAttack:
    """Smallest-budget white-box attack from a sorted list of eps scales."""

    base: AttackBudget
    candidates: Sequence[float]
    method: str = "pgd"
    schedule: PgdSchedule = PgdSchedule()
    bifurcation: bool = False
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, agent, x):
        # one reference sample per observation, shared by every candidate budget
        state = self.rng.bit_generator.state
        self.rng.standard_normal()

        def run(scale):
            budget = AttackBudget(np.where(self.base.epsilon > 0, scale, 0.0), self.base.low, self.base.high)
            rng = np.random.default_rng()
            rng.bit_generator.state = state
            return _white_box(agent, x, budget, self.method, self.schedule, self.bifurcation, rng)

        eps, out, calls = dynamic_distortion(run, self.candidates)
        out.info.update(eps=eps, calls=calls)
        return out


@dataclass
class TargetedAttack:
    """Policy induction: the adversarial policy's choice is the target."""

    adversary: PolicyAgent
    budget: AttackBudget
    schedule: PgdSchedule = PgdSchedule()

    def __call__(self, agent, x):
        target_action = self.adversary.decide(x)[0]
        space = agent.action_space
        if space.discrete:
            target = int(space.nearest_bin(target_action))
            out = targeted_attack(agent.policy_network(), x, target, self.budget, self.schedule)
        else:
            out = targeted_attack(agent.policy_network(), x, target_action, self.budget, self.schedule, continuous=True)
        out.info["target_action"] = float(target_action)
        out.info["target_reached"] = out.success
        return _agent_outcome(agent, out)


@dataclass
class RandomNoiseAttack:
    """Random corner of the eps-box; a control for gradient attacks."""

    budget: AttackBudget
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, agent, x):
        x = np.asarray(x, dtype=np.float64)
        signs = self.rng.choice((-1.0, 1.0), size=x.shape)
        adv = self.budget.project(x, x + signs * self.budget.epsilon)
        net = agent.policy_network()
        return _agent_outcome(agent, _outcome(net, x, adv, output_changed))


@dataclass
class LearnedAdversaryAttack:
    """Perturbation chosen by a trained adversary policy, scaled per feature by ``bound``."""

    adversary: PolicyAgent
    bound: np.ndarray

    def __post_init__(self):
        self.budget = AttackBudget(self.bound)

    def __call__(self, agent, x):
        x = np.asarray(x, dtype=np.float64)
        adv = self.budget.project(x, perturb(x, self.adversary.decide(x)[0], self.budget.epsilon))
        return _agent_outcome(agent, _outcome(agent.policy_network(), x, adv, output_changed))


class NoAttack:
    def __call__(self, agent, x):
        x = np.asarray(x, dtype=np.float64)
        net = agent.policy_network()
        return _agent_outcome(agent, _outcome(net, x, x.copy(), output_changed))


def closed_loop_attack(env: DemandResponseEnv, agent: PolicyAgent, attack, metadata=None):
    """Run a clean and an attacked episode.

    In the attacked episode the true observation at each hour is perturbed
    before the agent acts, so the battery trajectory diverges from the clean
    one. Returns ``(clean_log, adversarial_log, outcomes)``.
    """
    meta = dict(metadata or {})
    clean = run_episode(env, lambda o: agent.decide(o)[0], dict(meta, attack="none"))
    outcomes = []
    perceived = []

    def policy(obs):
        out = attack(agent, obs)
        outcomes.append(out)
        perceived.append(out.adversarial)
        return out.adversarial_action

    adv = run_episode(env, policy, dict(meta, attack=type(attack).__name__))
    adv.perceived = np.array(perceived)
    return clean, adv, outcomes


def attack_metrics(clean: EpisodeLog, adversarial: EpisodeLog, outcomes, baseline: EpisodeLog, space: ActionSpace) -> dict:
    """ASR, action MAE, (dis)charge reversal rate and per-KPI adversarial regret."""
    if not (len(clean) == len(adversarial) == len(outcomes)):
        raise ValueError("clean log, adversarial log and outcomes differ in length")
    orig = np.array([o.original_action for o in outcomes], dtype=np.float64)
    advs = np.array([o.adversarial_action for o in outcomes], dtype=np.float64)
    if space.discrete:
        changed = space.nearest_bin(orig) != space.nearest_bin(advs)
    else:
        changed = np.abs(advs - orig) > CONTINUOUS_ASR_THRESHOLD
    reversed_ = (orig >= 0) != (advs >= 0)
    k_clean = compute_kpis(clean, baseline)
    k_adv = compute_kpis(adversarial, baseline)
    dist = np.array([o.distortion for o in outcomes]) if outcomes else np.zeros((0, 0))
    return {
        "asr": float(changed.mean()),
        "mae": float(np.abs(advs - orig).mean()),
        "reversal": float(reversed_.mean()),
        "clean_kpi": {k: getattr(k_clean, k) for k in KPI_NAMES},
        "attacked_kpi": {k: getattr(k_adv, k) for k in KPI_NAMES},
        "regret": {k: getattr(k_adv, k) - getattr(k_clean, k) for k in KPI_NAMES},
        "mean_distortion": dist.mean(axis=0).tolist() if dist.size else [],
        "max_linf": float(dist.max()) if dist.size else 0.0,
    }


def write_outcomes(outcomes, path) -> None:
    with Path(path).open("w") as fh:
        for t, out in enumerate(outcomes):
            fh.write(json.dumps(dict(out.record(), t=t)) + "\n")


# -- snooping ----------------------------------------------------------------------


@dataclass
class ProxyModel:
    network: DenseNetwork
    discrete: bool
    n_bins: int | None
    score: float
    grid_scores: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def action(self, x):
        out = self.network.forward(x)
        if self.discrete:
            return ActionSpace("discrete", self.n_bins).bin_action(np.argmax(out, axis=-1))
        return np.clip(out[..., 0], -1.0, 1.0)


def time_series_splits(n: int, folds: int):
    """Chronological folds: train on a prefix, validate on the following block."""
    if folds < 1 or n < folds + 1:
        raise ValueError("not enough samples for the requested folds")
    block = n // (folds + 1)
    for k in range(1, folds + 1):
        stop = block * (k + 1) if k < folds else n
        yield np.arange(0, block * k), np.arange(block * k, stop)


def _fit(net, X, y, kind, lr, epochs, batch, rng):
    opt = Adam(net, lr=lr)
    spec = LossSpec("cross_entropy", label=0, direction="toward") if kind == "ce" else LossSpec("mse", reference=np.zeros(1), direction="toward")
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            targets = y[idx] if kind == "ce" else y[idx][:, None]
            _, grads = parameter_gradient(net, X[idx], spec, targets)
            opt.step(grads)
    return net


def _val_loss(net, X, y, kind):
    out = net.forward(X)
    if kind == "ce":
        spec = LossSpec("cross_entropy", label=0)
        loss, _ = loss_and_grad(out, spec, y)
    else:
        loss = (out[:, 0] - y) ** 2
    return float(np.mean(loss))


DEFAULT_PROXY_GRID = ({"hidden": (64, 64), "lr": 3e-3}, {"hidden": (64,), "lr": 3e-3}, {"hidden": (128, 128), "lr": 1e-3})


def train_proxy(
    logs: Sequence[EpisodeLog],
    grid=DEFAULT_PROXY_GRID,
    discrete: bool = True,
    n_bins: int = 20,
    folds: int = 3,
    epochs: int = 60,
    batch: int = 64,
    seed: int = 0,
) -> ProxyModel:
    """Behaviour-cloning imitator chosen by chronological cross-validation."""
    logs = [l for l in logs if len(l)]
    if not logs:
        raise ValueError("no logged (observation, action) pairs")
    X = np.vstack([l.perceived for l in logs])
    a = np.concatenate([l.actions for l in logs])
    kind = "ce" if discrete else "mse"
    y = (np.clip(np.rint((a + 1.0) * (n_bins - 1) / 2.0), 0, n_bins - 1).astype(int) if discrete else a)
    out_width = n_bins if discrete else 1
    rng = np.random.default_rng(seed)
    scores = []
    for point in grid:
        fold_losses = []
        for train_idx, val_idx in time_series_splits(len(X), folds):
            net = DenseNetwork.initialize([X.shape[1], *point["hidden"], out_width], rng)
            _fit(net, X[train_idx], y[train_idx], kind, point["lr"], epochs, batch, rng)
            fold_losses.append(_val_loss(net, X[val_idx], y[val_idx], kind))
        scores.append({"hidden": list(point["hidden"]), "lr": point["lr"], "score": float(np.mean(fold_losses))})
    best = min(range(len(grid)), key=lambda i: scores[i]["score"])
    point = grid[best]
    net = DenseNetwork.initialize([X.shape[1], *point["hidden"], out_width], rng)
    _fit(net, X, y, kind, point["lr"], epochs, batch, rng)
    provenance = {"episodes": [l.metadata for l in logs], "samples": int(len(X)), "folds": folds, "epochs": epochs}
    return ProxyModel(net, discrete, n_bins if discrete else None, scores[best]["score"], scores, provenance)


@dataclass
class SnoopingAttack:
    """FGM computed on a proxy imitator and applied to the victim's observation.

    A continuous proxy without bifurcation is attacked away from its output
    jittered by its validation error, so the gradient does not vanish.
    """

    proxy: ProxyModel
    budget: AttackBudget
    bifurcation: bool = False
    seed: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, agent, x):
        net = self.proxy.network
        spec = None
        if self.bifurcation:
            mode = (
                BifurcationMode.groups(range(self.proxy.n_bins // 2, self.proxy.n_bins), range(self.proxy.n_bins // 2))
                if self.proxy.discrete
                else BifurcationMode.negation()
            )
            net = bifurcate(net, mode)
        elif not self.proxy.discrete:
            y = net.forward(x)
            spec = default_loss(net, x, y + np.sqrt(self.proxy.score) * self.rng.standard_normal(1))
        out = fgm(net, x, self.budget, spec)
        victim = agent.policy_network()
        out.original_output = victim.forward(out.x)
        out.adversarial_output = victim.forward(out.adversarial)
        return _agent_outcome(agent, out)


def snooping_attack(env, victim: PolicyAgent, proxy: ProxyModel, budget: AttackBudget, bifurcation: bool = False, metadata=None, seed: int = 0):
    """Closed-loop black-box episode driven by a proxy's gradients."""
    return closed_loop_attack(env, victim, SnoopingAttack(proxy, budget, bifurcation, seed), metadata)
