import pytest
import torch

from refonly.data import generate_sprites
from refonly.numerics import Rng


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus32():
    return generate_sprites(100, 8, 32, Rng(7))


@pytest.fixture(scope="session")
def small_corpus():
    return generate_sprites(10, 5, 32, Rng(3))
