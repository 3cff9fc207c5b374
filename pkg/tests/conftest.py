import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kptrain.scenegen import SceneConfig, generate_scene, sample_pair  # noqa: E402

SMALL = SceneConfig(image_size=64, n_tracks=1500)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SMALL, seed=3)


@pytest.fixture(scope="session")
def small_pair(small_scene):
    return sample_pair(small_scene, 0.4, 0.9, seed=11)


@pytest.fixture(scope="session")
def pair128():
    scene = generate_scene(SceneConfig(), seed=5)
    return sample_pair(scene, 0.4, 0.9, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
