import pytest

from deepmod.gridworld import FROZEN_LAKE
from deepmod.learners import DDPNConfig, one_hot_source, train_ddpn
from deepmod.tabular import value_iteration


@pytest.fixture(scope="session")
def spec():
    return FROZEN_LAKE


@pytest.fixture(scope="session")
def vi(spec):
    return value_iteration(spec)


@pytest.fixture(scope="session")
def clean_ddpn(spec):
    """A no-noise DDPN trained with the default schedule, and its trace."""
    return train_ddpn(spec, DDPNConfig(seed=0), one_hot_source(spec))


RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record and print one pass/fail line per acceptance criterion."""

    def record(n: int, passed: bool, detail: str) -> None:
        RESULTS[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        passed, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
