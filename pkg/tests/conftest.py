import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pedelkit.instances import (
    embed_bandit_as_mdp,
    encode_tabular,
    make_hard_bandit,
    make_scaled_hard_bandit,
    random_tabular,
)

settings.register_profile(
    "pedelkit", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("pedelkit")


@pytest.fixture(scope="session")
def hard4():
    """Faithful hard bandit at d=4 and its MDP embedding."""
    b = make_hard_bandit(4, 1e-5)
    return b, embed_bandit_as_mdp(b)


@pytest.fixture(scope="session")
def hard20():
    b = make_hard_bandit(20, 5e-7)
    return b, embed_bandit_as_mdp(b)


@pytest.fixture(scope="session")
def scaled4():
    b = make_scaled_hard_bandit(4, 0.02, 0.4, 0.1)
    return b, embed_bandit_as_mdp(b)


def tabular_instance(seed, S=3, A=2, H=3):
    rng = np.random.default_rng(seed)
    P, r = random_tabular(S, A, H, rng)
    return encode_tabular(S, A, H, P, r), P, r


@pytest.fixture
def tab3():
    return tabular_instance(0)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":")[1:])):
            terminalreporter.write_line(line)
