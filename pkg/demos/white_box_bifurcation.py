"""Train a discrete and a continuous battery controller, then attack both.

Compares direct PGD against PGD on the bifurcated network at a small uniform
budget, and shows the effect of the stealthy preset.

    python3 demos/white_box_bifurcation.py
"""

from loadattack.agents import ActionSpace, PpoConfig, ppo_train
from loadattack.attacks import AttackBudget, WhiteBoxAttack, attack_metrics, closed_loop_attack, stealthy_budget
from loadattack.env import DemandResponseEnv, generate_synthetic, null_episode

env = DemandResponseEnv(generate_synthetic(seed=0, days=30))
baseline = null_episode(env)
spaces = {"discrete": ActionSpace("discrete", 20), "continuous": ActionSpace("continuous")}

print("training controllers on 30 synthetic days")
agents = {kind: ppo_train(env, PpoConfig.desk(seed=1), space) for kind, space in spaces.items()}

uniform = AttackBudget.uniform(0.05)
attacks = {
    "direct PGD eps 0.05": (WhiteBoxAttack(uniform, seed=1), uniform),
    "bifurcated PGD eps 0.05": (WhiteBoxAttack(uniform, bifurcation=True), uniform),
    "bifurcated PGD stealthy": (WhiteBoxAttack(stealthy_budget(env), bifurcation=True), stealthy_budget(env)),
}

print(f"{'agent':<11} {'attack':<25} {'clean KPI':>9} {'regret':>8} {'ASR':>6} {'reversal':>9}")
for kind, agent in agents.items():
    for name, (attack, _) in attacks.items():
        clean, adv, outcomes = closed_loop_attack(env, agent, attack)
        m = attack_metrics(clean, adv, outcomes, baseline, agent.action_space)
        print(
            f"{kind:<11} {name:<25} {m['clean_kpi']['electricity_consumption']:9.3f} "
            f"{m['regret']['electricity_consumption']:8.3f} {m['asr']:6.2f} {m['reversal']:9.2f}"
        )

# A KPI below 1 means the controller beats having no battery at all; the
# regret column is how much of that advantage the perturbation takes away.
