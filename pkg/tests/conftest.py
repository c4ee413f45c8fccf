import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from weakrvos.data import generate_dataset, load_sample
from weakrvos.model import ModelConfig, RvosNet


def tiny_config(vocab_size=15, seed=3):
    """Small model used throughout the unit tests; fast on CPU."""
    return ModelConfig(
        vocab_size=vocab_size,
        embed_dim=8,
        encoder_channels=(4, 5, 6, 8),
        n_attn_heads=2,
        filter_layers=3,
        filter_hidden=3,
        blcl_dim=4,
        fpn_out_channels=6,
        enh_channels=6,
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_net(tiny_cfg):
    return RvosNet(tiny_cfg)


@pytest.fixture()
def tiny_net_double(tiny_cfg):
    return RvosNet(tiny_cfg).double()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds_small")
    return generate_dataset(root, n_videos=6, T=5, H=64, W=64, seed=11)


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    return [load_sample(small_dataset, r) for r in small_dataset.records]


@pytest.fixture(autouse=True)
def _single_thread():
    # Keeps CPU math deterministic across machines with different core counts.
    torch.set_num_threads(1)
    yield
