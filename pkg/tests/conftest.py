from __future__ import annotations

import numpy as np
import pytest

from dyrank.config import ExperimentConfig
from dyrank.model import DualEncoderConfig, DualEncoderModel, EncoderConfig
from dyrank.workbench import build_tasks, pretrained_model


def tiny_model_config() -> DualEncoderConfig:
    return DualEncoderConfig(
        vision=EncoderConfig(num_layers=2, hidden_dim=16, mlp_dim=32, num_heads=2,
                             vocab_size=16, max_seq_len=12, embed_dim=8),
        text=EncoderConfig(num_layers=2, hidden_dim=16, mlp_dim=32, num_heads=2,
                           vocab_size=32, max_seq_len=8, embed_dim=8),
    )


@pytest.fixture
def tiny_model() -> DualEncoderModel:
    return DualEncoderModel(tiny_model_config(), seed=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_config() -> ExperimentConfig:
    return ExperimentConfig()


@pytest.fixture(scope="session")
def default_tasks(default_config):
    return build_tasks(default_config)


@pytest.fixture(scope="session")
def pretrained(default_config, default_tasks):
    """The default desk-scale pre-trained snapshot (built once per session)."""
    return pretrained_model(default_config, default_tasks)
