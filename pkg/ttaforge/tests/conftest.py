import numpy as np
import pytest

from ttaforge.core import CategorySpace


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end adaptation runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def categories():
    return CategorySpace(("square", "disk", "triangle"))


@pytest.fixture
def detector(categories):
    from ttaforge.backend import ToyDetector

    return ToyDetector.from_seed(categories, seed=3)


@pytest.fixture
def small_detector(categories):
    from ttaforge.backend import ToyDetector

    return ToyDetector.from_seed(categories, seed=5, patch_size=4, dim=8)


@pytest.fixture
def embedder():
    from ttaforge.backend import ToyEmbedder

    return ToyEmbedder(seed=0, dim=64)


@pytest.fixture
def backends(detector, embedder):
    from ttaforge.adapt import Backends

    return Backends(detector, embedder)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_scenes(count, seed=7, **spec):
    from ttaforge.data import SyntheticSpec, render

    spec = SyntheticSpec(num_images=count, **spec)
    return [render(spec, child) for child in np.random.SeedSequence(seed).spawn(count)]


@pytest.fixture
def scene():
    """One 64x64 synthetic image with its (box, category) objects."""
    return make_scenes(1)[0]


@pytest.fixture
def stream():
    return [(i, image) for i, (image, _) in enumerate(make_scenes(16, seed=11, palette_shift=True))]
