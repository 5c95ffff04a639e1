"""Shared checks for closed-loop attack tests."""
import numpy as np


def assert_budget_sound(outcomes, budget):
    """Every perturbation lies in the eps-box and the valid box; masked features are untouched."""
    eps = np.asarray(budget.epsilon)
    for out in outcomes:
        d = out.adversarial - out.x
        assert np.all(np.abs(d) <= eps), "perturbation exceeds its budget"
        assert np.all(out.adversarial >= budget.low) and np.all(out.adversarial <= budget.high)
        assert np.all(d[eps == 0] == 0.0)
    BUDGET_CHECKS["runs"] += 1
    BUDGET_CHECKS["steps"] += len(outcomes)


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict = {}
BUDGET_CHECKS = {"runs": 0, "steps": 0}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def majority(flags) -> bool:
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)
