import numpy as np
import pytest
import torch

from octdehaze.toydata import make_toy_rgbd


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_sources():
    return make_toy_rgbd(10, size=32, seed=123)


@pytest.fixture(scope="session")
def toy_sources_64():
    return make_toy_rgbd(16, size=64, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
