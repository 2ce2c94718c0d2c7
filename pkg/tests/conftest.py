import numpy as np
import pytest

from multiscale_hjb.model import ScenarioConfig, build_example
from multiscale_hjb.torus import TorusGrid

BASE = dict(theta_a=1.0, theta_b=1.0, theta_c=1.0, theta_d=0.5, theta_e=0.1,
            sigma_x=0.3, sigma_y=1.0, alpha=1.0, beta=1.0)


def make_cfg(example_id=1, **changes):
    params = dict(BASE, example_id=example_id)
    params.update(changes)
    return ScenarioConfig(**params)


@pytest.fixture
def cfg1():
    return make_cfg(1)


@pytest.fixture
def cfg2():
    return make_cfg(2)


@pytest.fixture
def ex1(cfg1):
    return build_example(cfg1)


@pytest.fixture
def ex2(cfg2):
    return build_example(cfg2)


@pytest.fixture
def grid32():
    return TorusGrid(2, 32)


@pytest.fixture
def grid16():
    return TorusGrid(2, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
