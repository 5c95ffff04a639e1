"""A black-box attacker and two defenses.

The attacker only sees observations and actions, fits an imitation proxy,
and attacks the proxy's gradients. The defender compares a discrete action
space and adversarial training (ATLA) against a conventional controller.

    python3 demos/black_box_and_defenses.py
"""

from loadattack.agents import ActionSpace, AtlaConfig, PpoConfig, atla_train, category_bound, ppo_train
from loadattack.attacks import AttackBudget, RandomNoiseAttack, SnoopingAttack, attack_metrics, closed_loop_attack, train_proxy
from loadattack.env import DemandResponseEnv, generate_synthetic, null_episode, run_episode

env = DemandResponseEnv(generate_synthetic(seed=0, days=30))
baseline = null_episode(env)
discrete = ActionSpace("discrete", 20)

victims = {
    "continuous PPO": ppo_train(env, PpoConfig.desk(seed=1), ActionSpace("continuous")),
    "discrete PPO": ppo_train(env, PpoConfig.desk(seed=1), discrete),
    "discrete ATLA": atla_train(env, PpoConfig.desk(seed=1), AtlaConfig(category_bound()), discrete),
}

eps = 0.13
budget = AttackBudget.uniform(eps)
print(f"{'victim':<15} {'clean KPI':>9} {'snoop regret':>13} {'noise regret':>13} {'snoop ASR':>10}")
for name, agent in victims.items():
    clean = run_episode(env, lambda o: agent.decide(o)[0])
    proxy = train_proxy([clean], discrete=agent.action_space.discrete, seed=1)
    results = [
        attack_metrics(*closed_loop_attack(env, agent, attack), baseline, agent.action_space)
        for attack in (SnoopingAttack(proxy, budget, bifurcation=True), RandomNoiseAttack(budget, 1))
    ]
    snoop, noise = results
    print(
        f"{name:<15} {snoop['clean_kpi']['electricity_consumption']:9.3f} "
        f"{snoop['regret']['electricity_consumption']:13.3f} {noise['regret']['electricity_consumption']:13.3f} "
        f"{snoop['asr']:10.2f}"
    )
