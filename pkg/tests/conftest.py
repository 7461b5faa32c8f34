import numpy as np
import pytest

from featservo import dynamics, policy as pol
from featservo.featurize import build_pyramid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(rng):
    """Random two-level locally connected model on 8x8 maps with 2 channels and 4 controls."""
    return dynamics.random_model(rng, n_channels=2, n_controls=4, resolution=8, depth=1, scale=0.2)


@pytest.fixture
def small_state(rng, small_model):
    cur = rng.standard_normal((2, 8, 8))
    goal = rng.standard_normal((2, 8, 8))
    return pol.ServoState(build_pyramid(cur, small_model.depth), build_pyramid(goal, small_model.depth))
