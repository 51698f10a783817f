import numpy as np
import pytest

from gendissect import nn, scenes


@pytest.fixture(scope="session")
def planted():
    """Default planted generator, built once per test session."""
    net, truth = scenes.build_planted_generator(seed=0)
    return net, truth


@pytest.fixture(scope="session")
def universe():
    return scenes.default_universe()


@pytest.fixture(scope="session")
def sample_400(planted):
    """400 rendered scenes with featuremaps, shared across tests."""
    net, _ = planted
    zs = scenes.sample_z(101, 400)
    res = nn.forward(net, zs)
    return zs, res
