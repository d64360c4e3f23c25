"""Shared fixtures for the svtnet test suite."""

from pathlib import Path

import numpy as np
import pytest

from svtnet.config import (
    AugmentConfig,
    ExperimentConfig,
    ModelConfig,
    SynthConfig,
    TrainConfig,
    load_config,
)
from svtnet.gradcheck import TINY_MODEL
from svtnet.sparse_tensor import PointCloud

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Small network on a coarse lattice; clouds in [-1, 1] give ~10^2 voxels."""
    return ModelConfig(quant_step=0.25, **TINY_MODEL)


@pytest.fixture
def cube_cloud(rng) -> PointCloud:
    return PointCloud(rng.uniform(-1.0, 1.0, size=(300, 3)))


@pytest.fixture
def small_synth() -> SynthConfig:
    return SynthConfig(seed=3, scenes=4, copies=3, points=256)


@pytest.fixture
def tiny_experiment(tmp_path, tiny_model_config, small_synth) -> ExperimentConfig:
    """Experiment that trains for a handful of iterations in a temp directory."""
    config = ExperimentConfig(
        seed=5,
        workers=2,
        output_dir=tmp_path / "run",
        model=tiny_model_config,
        training=TrainConfig(epochs=2, lr_decay_epoch=1, batch_init=4, batch_max=8),
        augment=AugmentConfig(),
        synth=small_synth,
    )
    config.logging.console = False
    config.validate()
    return config


@pytest.fixture
def fixture_config() -> ExperimentConfig:
    return load_config(FIXTURES / "experiment.yaml")
