"""Shared fixtures and configuration for all tests."""
import json
import tempfile
from pathlib import Path

import pytest
import torch

from trusfuse.network import NetworkConfig, build_model
from trusfuse.phantom import PhantomConfig, generate_dataset
from trusfuse.trainer import TrainConfig

TINY_DIMS = (8, 16, 16, 1)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test outputs."""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def tiny_phantom_config():
    """Eight small phantoms, half of them positive."""
    return PhantomConfig(n_samples=8, dims=TINY_DIMS, master_seed=7)


@pytest.fixture
def tiny_dataset(temp_dir, tiny_phantom_config):
    """A generated phantom dataset; returns its manifest (root set to the data directory)."""
    return generate_dataset(tiny_phantom_config, temp_dir / "data")


@pytest.fixture
def tiny_network_config():
    """Dual-stream network with one block per stage and 1/16 width."""
    return NetworkConfig(stage_blocks=(1, 1, 1, 1), width_multiplier=0.0625)


@pytest.fixture
def tiny_model(tiny_network_config):
    return build_model(tiny_network_config, seed=0)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(epochs=2, base_lr=0.01, init_seed=0, shuffle_seed=0)


@pytest.fixture
def random_batch():
    """A pair of (1, 1, 8, 16, 16) videos in [0, 1]."""
    generator = torch.Generator().manual_seed(0)
    return (
        torch.rand(1, 1, 8, 16, 16, generator=generator),
        torch.rand(1, 1, 8, 16, 16, generator=generator),
    )


@pytest.fixture
def tiny_run_config(temp_dir):
    """A run config document for the tiny setup, written to disk."""
    document = {
        "phantom": {"n_samples": 8, "dims": list(TINY_DIMS), "master_seed": 7},
        "network": {"stage_blocks": [1, 1, 1, 1], "width_multiplier": 0.0625},
        "training": {"epochs": 2, "base_lr": 0.01},
        "evaluation": {"roc_plot": False},
        "ablation": {"variants": ["bmode", "fusion"], "seeds": [0]},
    }
    path = temp_dir / "run.json"
    path.write_text(json.dumps(document))
    return path
