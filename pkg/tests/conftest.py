"""Shared fixtures for sada tests."""

import numpy as np
import pytest

from sada import cache
from sada.config import AdaptConfig
from sada.model import TinySegNet
from sada.synth import generate, read_manifest


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    """Untrained network with default classes."""
    return TinySegNet(num_classes=5, seed=0)


@pytest.fixture
def image(rng):
    """A 3 x 16 x 16 image in [0, 1]."""
    return rng.random((3, 16, 16)).astype(np.float32)


@pytest.fixture
def fast_cfg():
    """Adaptation settings small enough for unit tests."""
    return AdaptConfig(n_iters=2, scales=(0.5, 1.0), use_flip=True, use_gray=False, eta=0.01)


@pytest.fixture
def val_dir(tmp_path):
    """Three generated validation samples."""
    out = tmp_path / "val"
    generate(out, "val", n=3, seed=0)
    return out


@pytest.fixture
def val_set(val_dir):
    return read_manifest(val_dir)


@pytest.fixture(autouse=True)
def clear_sample_cache():
    """Each test starts with an empty sample cache."""
    cache.clear()
    yield
    cache.clear()
