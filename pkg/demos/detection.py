"""Can a defender tell an attacked episode from a clean one?

Runs a loud FGM attack and a stealthy PGD attack on a 90-day episode, then
tests both against day-stratified clean baselines in observation space and
in absolute-variation space.

    python3 demos/detection.py
"""

from loadattack.agents import ActionSpace, PpoConfig, ppo_train
from loadattack.attacks import AttackBudget, WhiteBoxAttack, closed_loop_attack, stealthy_budget
from loadattack.detect import bootstrap_p_value, detect_episode, month_split, parity_split
from loadattack.env import DemandResponseEnv, generate_synthetic

BOOTSTRAPS = 1000
PAIRS = 30

env = DemandResponseEnv(generate_synthetic(seed=0, days=90))
agent = ppo_train(env, PpoConfig.desk(seed=1), ActionSpace("continuous"))

runs = {
    "FGM eps 0.2": WhiteBoxAttack(AttackBudget.uniform(0.2), "fgm", bifurcation=True),
    "stealthy PGD": WhiteBoxAttack(stealthy_budget(env), bifurcation=True),
}
for name, attack in runs.items():
    clean, adv, _ = closed_loop_attack(env, agent, attack)
    rep = detect_episode(clean.observations, adv.perceived, PAIRS, BOOTSTRAPS, seed=3)
    o, v = rep.observation, rep.variation
    print(f"{name}")
    print(f"  observations: MMD {o['mmd']:.4f} (clean max {rep.baseline['mmd_max']:.4f}), p {o['p_value']:.3f}, plausible {o['plausible']}")
    print(f"  variation:    p {v['p_value']:.3f} (clean 5th percentile {rep.variation_baseline['p_p5']:.3f})")

# Splits that break the day structure look like two distributions even
# without any attack, which is why the baselines stratify by day.
obs = clean.observations
print(f"January vs February p {bootstrap_p_value(*month_split(obs, env.dataset.column('month')), BOOTSTRAPS).p_value:.3f}")
print(f"even vs odd hours   p {bootstrap_p_value(*parity_split(obs), BOOTSTRAPS).p_value:.3f}")
