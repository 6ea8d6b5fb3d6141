import numpy as np
import pytest

from fixtures import build_fixture
from model_io import make_rng


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run tests that train networks or run full campaigns')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def resblock():
    graph, _ = build_fixture('resblock-toy', seed=0)
    return graph


@pytest.fixture
def linear():
    graph, _ = build_fixture('linear-toy', seed=0)
    return graph


@pytest.fixture
def grouped():
    graph, _ = build_fixture('grouped-toy', seed=0)
    return graph


@pytest.fixture
def rng():
    return make_rng(1234)


def random_batch(graph, n=4, seed=0):
    """Uniform images and arbitrary labels shaped for `graph`."""
    r = make_rng(seed, 99)
    x = r.uniform(size=(n,) + graph.shapes[graph.input_layer.id].array_shape()).astype(np.float32)
    y = r.integers(0, graph.shapes[graph.loss_layer.id].channels, size=n)
    return x, y
