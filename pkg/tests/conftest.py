"""Shared fixtures: micro model configs and small generated scenes."""

import numpy as np
import pytest

from uniscale import scenes
from uniscale.model import Model, ModelConfig


MICRO_CONFIG = dict(image_size=16, patch_size=8, embed_dim=8,
                    aggregator_blocks=2, attention_heads=2,
                    register_count=2, mlp_ratio=2)


@pytest.fixture(scope="session")
def micro_model():
    return Model(ModelConfig(seed=0, **MICRO_CONFIG))


@pytest.fixture(scope="session")
def micro_scene():
    return scenes.generate_scene(scenes.SceneSpec(seed=3, n_frames=2,
                                                  image_size=16))


@pytest.fixture(scope="session")
def small_scene():
    return scenes.generate_scene(scenes.SceneSpec(seed=1, n_frames=3,
                                                  image_size=32))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
