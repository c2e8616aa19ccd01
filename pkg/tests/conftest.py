import numpy as np
import pytest

from mobandit.core import EnvSpec, RewardTable, TabularPolicy


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_env():
    return EnvSpec(num_prompts=2, vocab_size=3, out_len=2, num_objectives=2)


@pytest.fixture
def small_instance(small_env, rng):
    pol = TabularPolicy.random(small_env, rng)
    R = RewardTable.for_env(small_env, rng.uniform(-1, 1, size=(2, 9, 2)))
    return small_env, pol, R


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def pytest_collection_modifyitems(items):
    # reference checks run before anything that relies on them; acceptance runs last
    def rank(item):
        name = item.fspath.basename
        return 0 if name == "test_oracle.py" else 2 if name == "test_acceptance.py" else 1

    items.sort(key=rank)
