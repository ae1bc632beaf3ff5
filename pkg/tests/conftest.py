import numpy as np
import pytest

from reno.generators import embed_prompt, make_generator


@pytest.fixture
def prompt():
    return embed_prompt("a red car")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_mlp():
    return make_generator("mlp", 16, (8, 8, 3), weight_seed=3)
