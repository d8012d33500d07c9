import numpy as np
import pytest

from graft.tensor_store import Checkpoint, Tensor, TensorRole


def random_checkpoint(rng, n_tensors=3, max_dim=6, roles=None, metadata=None):
    entries = {}
    for i in range(n_tensors):
        shape = tuple(int(s) for s in rng.integers(1, max_dim + 1, size=2))
        role = roles[i % len(roles)] if roles else TensorRole.OTHER
        entries[f"t{i}"] = Tensor(rng.normal(size=shape).astype(np.float32), role)
    return Checkpoint(entries, metadata)


def lora_checkpoint(rng, adapters=("adapter0", "adapter1"), rank=2, dims=(5, 4)):
    m, n = dims
    entries = {"embed": Tensor(rng.normal(size=(3, n)), TensorRole.OTHER)}
    for name in adapters:
        entries[f"{name}.A"] = Tensor(rng.normal(size=(rank, n)), TensorRole.LORA_A)
        entries[f"{name}.B"] = Tensor(rng.normal(size=(m, rank)), TensorRole.LORA_B)
    return Checkpoint(entries)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
