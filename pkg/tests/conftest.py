import numpy as np
import pytest

from tjstg import synth
from tjstg.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def leaf(rng):
    """Factory for named (trainable) random tensors."""

    def make(name, *shape, scale=1.0):
        return Tensor(scale * rng.standard_normal(shape), name=name)

    return make


@pytest.fixture(scope="session")
def tiny_task():
    return synth.TaskConfig(T=3, N=4, h=2, w=2, d=8, C=3, K=3, seed=5)


@pytest.fixture(scope="session")
def small_split(tiny_task):
    return synth.make_split(tiny_task, 12, 0)
