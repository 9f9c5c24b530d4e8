# -*- coding: utf-8 -*-
"""Fixtures compartidas: configuración de modelo diminuta y escenas pequeñas renderizadas."""

import numpy as np
import pytest

from depthCore.autodiff import set_precision
from depthCore.models import AdaptDepthModel, ModelConfig
from depthCore.scenes import plane_scene, sequence_from_spec, street_scene


@pytest.fixture(autouse=True)
def precision_32():
    set_precision(32)
    yield
    set_precision(32)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        height=32,
        width=64,
        encoder_widths=(4, 8, 8, 16),
        decoder_widths=(4, 4, 8, 8),
        blocks_per_stage=1,
        scales=2,
    )


@pytest.fixture
def tiny_model(tiny_config) -> AdaptDepthModel:
    return AdaptDepthModel(tiny_config, seed=0)


@pytest.fixture
def tiny_checkpoint(tiny_model):
    return tiny_model.to_checkpoint({"seed": 0})


@pytest.fixture(scope="session")
def tiny_scene():
    return street_scene(seed=0, frames=4, width=64, height=32, boxes=2)


@pytest.fixture(scope="session")
def tiny_bundles(tiny_scene):
    return sequence_from_spec(tiny_scene)


@pytest.fixture(scope="session")
def stereo_scene():
    return street_scene(seed=1, frames=3, width=64, height=32, boxes=2, stereo_baseline=0.5)


@pytest.fixture(scope="session")
def plane_shift_scene():
    return plane_scene(depth=5.0, frames=2, tx=0.2, width=64, height=32)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
