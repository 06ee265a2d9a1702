import numpy as np
import pytest
import torch

from forge15.minilm import ModelConfig, init_params, param_shapes
from forge15.tensor_store import Checkpoint

torch.set_num_threads(1)

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)


def golden_checkpoint() -> Checkpoint:
    """Deterministic checkpoint built from exactly representable values."""
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, max_seq_len=32)
    tensors = {}
    for k, (name, shape) in enumerate(sorted(param_shapes(cfg).items())):
        n = int(np.prod(shape))
        vals = ((np.arange(n, dtype=np.int64) * 7 + k * 13) % 97 - 48) / 64.0
        tensors[name] = vals.reshape(shape).astype(np.float32)
    return Checkpoint(cfg, tensors, {"stage": "golden", "seed": "0"})


def random_checkpoint(cfg: ModelConfig, seed: int, meta=None) -> Checkpoint:
    rng = np.random.default_rng(seed)
    tensors = {k: rng.standard_normal(s).astype(np.float32) for k, s in param_shapes(cfg).items()}
    return Checkpoint(cfg, tensors, meta or {})


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params():
    return init_params(TINY, seed=3)
