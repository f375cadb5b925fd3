import numpy as np
import pytest
from hypothesis import settings

from spnas.latency import synth_lut
from spnas.search_space import BlockConfig, MacroArchConfig

settings.register_profile("repo", deadline=None, max_examples=40)
settings.load_profile("repo")


def lut_for(arch, seed=0, **kw):
    return synth_lut([s[:4] for s in arch.layer_specs()], seed=seed, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_arch():
    """2 blocks x 2 layers, 8x8x2 input."""
    return MacroArchConfig(blocks=(BlockConfig(2, 4, 1), BlockConfig(2, 8, 2)))


@pytest.fixture
def small_arch():
    return MacroArchConfig()


@pytest.fixture
def toy_lut(toy_arch):
    return lut_for(toy_arch)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
