"""Shared fixtures for the binorm test suite."""

import numpy as np
import pytest

from binorm.config import ModelConfig, load_model_config


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(42)


@pytest.fixture
def tiny_bcvnn() -> ModelConfig:
    return load_model_config("tiny-bcvnn")


@pytest.fixture
def tiny_blm() -> ModelConfig:
    return load_model_config("tiny-blm")


@pytest.fixture
def micro_blm() -> ModelConfig:
    """A language model small enough for per-test training runs."""
    return ModelConfig(
        kind="blm",
        max_len=8,
        emb_dim=16,
        num_heads=2,
        num_blocks=1,
        mlp_units_0=32,
        mlp_units_1=16,
        vocab_size=8,
    )


@pytest.fixture
def quiet_logs(monkeypatch):
    monkeypatch.setenv("BINORM_LOG", "error")
