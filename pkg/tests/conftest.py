import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from avse_policy_tuner.experiment import ExperimentConfig
from avse_policy_tuner.finetune import PpoConfig
from avse_policy_tuner.model import EnhancerModel, ModelConfig
from avse_policy_tuner.signals import (
    Scene,
    Waveform,
    generate_clean,
    generate_noise,
    mix_scene,
)


@pytest.fixture(scope="session")
def DATA_DIR() -> Path:
    return (Path(os.path.abspath(os.path.dirname(__file__))) / "data").resolve()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


## Signals


@pytest.fixture(scope="session")
def clean_waveform() -> Waveform:
    """One second of the synthetic voiced target at 16 kHz."""
    return generate_clean(1.0, f0_hz=140.0, seed=7)


@pytest.fixture(scope="session")
def white_noise() -> Waveform:
    return generate_noise("white", 1.25, seed=11)


@pytest.fixture(scope="session")
def scene_0db(clean_waveform: Waveform, white_noise: Waveform) -> Scene:
    scene = mix_scene(clean_waveform, white_noise, 0.0, seed=3)
    scene.scene_id = "scene-test"
    return scene


## Models


@pytest.fixture(scope="session")
def tiny_model_config() -> ModelConfig:
    """A model small enough for finite-difference checks."""
    return ModelConfig(N=4, kernel=8, stride=4, tcn_blocks=2, tcn_channels=4, d_v=4)


@pytest.fixture
def tiny_model(tiny_model_config: ModelConfig) -> EnhancerModel:
    return EnhancerModel(tiny_model_config, seed=5)


@pytest.fixture
def small_model_config() -> ModelConfig:
    """Fast enough for end-to-end workflow runs in the unit suite."""
    return ModelConfig(N=8, kernel=16, stride=8, tcn_blocks=1, tcn_channels=8, d_v=4)


## Experiments


@pytest.fixture
def experiment_json(DATA_DIR: Path) -> Path:
    return DATA_DIR / "experiment.json"


@pytest.fixture
def small_experiment(tmp_path: Path, small_model_config: ModelConfig) -> ExperimentConfig:
    """
    Five one-second scenes (four train, one held-out) and a tiny model, writing into
    the test's temporary directory.
    """
    return replace(
        ExperimentConfig(),
        scene_count=5,
        snr_grid=(0.0,),
        model=small_model_config,
        ppo=PpoConfig(epochs=2, lr=1e-3),
        out_dir=tmp_path / "run",
        pretrain_steps=3,
        master_seed=99,
    )
