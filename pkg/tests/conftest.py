import numpy as np
import pytest

from crossground.synth import NEUTRAL_SHIFT, ShiftConfig, SynthConfig, generate_synthetic

# small rooms keep the suite fast; everything else is the library default
SMALL = SynthConfig(n_scenes=12, n_objects=(4, 7), n_frames=12, embedding_dim=64)


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def small_pair():
    return generate_synthetic(SMALL, ShiftConfig.strong(), seed=0)


@pytest.fixture(scope="session")
def small_source(small_pair):
    return small_pair[0]


@pytest.fixture(scope="session")
def neutral_pair():
    return generate_synthetic(SMALL, NEUTRAL_SHIFT, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
