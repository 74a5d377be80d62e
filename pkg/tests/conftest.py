import numpy as np
import pytest

from spine_rl.env import Anatomy, DrillingEnv, EpisodeConfig
from spine_rl.phantom import PhantomParams, generate_phantom


@pytest.fixture(scope="session")
def default_phantom():
    return generate_phantom(PhantomParams())


@pytest.fixture(scope="session")
def default_anatomy(default_phantom):
    vol, gs = default_phantom
    return Anatomy(vol, gs, name="default")


@pytest.fixture
def env(default_anatomy):
    return DrillingEnv([default_anatomy], EpisodeConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
