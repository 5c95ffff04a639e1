import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def desk_env():
    from loadattack.env import DemandResponseEnv, generate_synthetic

    return DemandResponseEnv(generate_synthetic(0, 30))


@pytest.fixture(scope="session")
def desk_discrete(desk_env):
    from loadattack.agents import ActionSpace, PpoConfig, ppo_train

    return ppo_train(desk_env, PpoConfig.desk(seed=0), ActionSpace("discrete", 20))


def pytest_addoption(parser):
    parser.addoption("--bootstraps", type=int, default=2000, help="permutations per MMD test in the acceptance suite (10000 for full fidelity)")


@pytest.fixture(scope="session")
def bootstraps(request):
    return request.config.getoption("--bootstraps")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
