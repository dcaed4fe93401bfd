import numpy as np
import pytest

from loraroute import AdapterPool, LoraAdapter, LoraFactors, ModelConfig, init_backbone


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=32, n_blocks=2, n_heads=4, d_ff=64, vocab_size=64, max_seq_len=48)


@pytest.fixture
def tiny_backbone(tiny_config):
    return init_backbone(tiny_config, seed=7)


def make_adapter(config, adapter_id, seed=0, rank=4, alpha=1.0, scale=0.1, metadata=""):
    """Random dense-factor adapter covering every (block, site) of `config`."""
    rng = np.random.default_rng(seed)
    factors = {}
    for j in range(config.n_blocks):
        for site in ("Q", "V"):
            factors[(j, site)] = LoraFactors(
                rng.normal(size=(config.d_model, rank)) * scale,
                rng.normal(size=(rank, config.d_model)) * scale,
            )
    return LoraAdapter(id=adapter_id, alpha=alpha, factors=factors, metadata=metadata)


def make_pool(config, n, seed=0, rank=4, alpha=1.0):
    pool = AdapterPool(config)
    for i in range(n):
        pool.add(make_adapter(config, f"ad{i:02d}", seed=seed + i, rank=rank, alpha=alpha))
    return pool


@pytest.fixture
def small_pool(tiny_config):
    return make_pool(tiny_config, 5)
