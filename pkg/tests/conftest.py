import numpy as np
import pytest

from ilrec.env import (TerminationRule, TrackerParams, WorldModelConfig, build_synthetic_catalog, fit_world_model,
                       generate_offline_log)
from ilrec.expert import ExpertConfig, build_expert, collect_demonstrations


class World:
    """A small fitted world shared by the unit tests."""

    def __init__(self, seed=0):
        self.rule = TerminationRule()
        self.catalog, self.users = build_synthetic_catalog(seed, 40, 5, 6, n_users=30)
        self.tracker = TrackerParams.for_catalog(self.catalog, self.rule)
        self.log = generate_offline_log(self.catalog, self.users, n_episodes=60, seed=seed, rule=self.rule,
                                        tracker=self.tracker, max_transitions=1500)
        self.world_model = fit_world_model(self.log, self.tracker, WorldModelConfig(epochs=5, seed=seed))
        self.expert = build_expert(self.catalog, self.world_model, self.rule, ExpertConfig(seed=seed))
        self.demo = collect_demonstrations(self.world_model, self.expert, self.users[:6], seed=seed)


@pytest.fixture(scope="session")
def world():
    return World()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""
    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
