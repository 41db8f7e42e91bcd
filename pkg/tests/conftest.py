import numpy as np
import pytest

from pianomotion import hand, keyboard


@pytest.fixture(scope="session")
def geom():
    return keyboard.build_keyboard()


@pytest.fixture(scope="session")
def skeletons():
    return hand.SkeletonPair.default()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
