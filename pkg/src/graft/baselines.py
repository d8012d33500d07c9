"""Reference merging methods: weight averaging, task arithmetic, TIES and DARE.

All methods compute in float64 and store float32. Task vectors are taken
per tensor against an ``init`` checkpoint whose order, roles and metadata
the merged result inherits.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidConfigError, ShapeError
from .tensor_store import Checkpoint


@dataclass(frozen=True)
class TiesConfig:
    trim_fraction: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.trim_fraction <= 1.0):
            raise InvalidConfigError(f"trim_fraction must lie in (0, 1], got {self.trim_fraction}")


@dataclass(frozen=True)
class DareConfig:
    drop_p: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.drop_p < 1.0):
            raise InvalidConfigError(f"drop_p must lie in [0, 1), got {self.drop_p}")


def _check_shapes(reference: Checkpoint, others: Sequence[Checkpoint]) -> None:
    for i, other in enumerate(others):
        for name, tensor in reference.items():
            if name not in other:
                raise ShapeError(f"expert {i} lacks tensor {name!r}")
            if other[name].shape != tensor.shape:
                raise ShapeError(f"{name}: expert {i} has shape {other[name].shape}, expected {tensor.shape}")


def task_vectors(init: Checkpoint, experts: Sequence[Checkpoint]) -> list[dict[str, np.ndarray]]:
    """``expert - init`` per tensor, float64."""
    _check_shapes(init, experts)
    return [
        {name: e[name].data.astype(np.float64) - t.data.astype(np.float64) for name, t in init.items()}
        for e in experts
    ]


def combine(init: Checkpoint, vectors: Sequence[dict[str, np.ndarray]], lam: float) -> Checkpoint:
    """``init + lam * sum(vectors)`` per tensor."""
    updates = {}
    for name, tensor in init.items():
        total = np.zeros(tensor.shape)
        for vec in vectors:
            total += vec[name]
        updates[name] = tensor.data.astype(np.float64) + lam * total
    return init.replace(updates)


def weight_average(experts: Sequence[Checkpoint]) -> Checkpoint:
    if not experts:
        raise InvalidConfigError("weight_average needs at least one expert")
    first = experts[0]
    _check_shapes(first, experts[1:])
    updates = {
        name: np.mean([e[name].data.astype(np.float64) for e in experts], axis=0) for name in first
    }
    return first.replace(updates)


def task_arithmetic(init: Checkpoint, experts: Sequence[Checkpoint], lam: float = 1.0) -> Checkpoint:
    return combine(init, task_vectors(init, experts), lam)


def trim(vector: np.ndarray, fraction: float) -> np.ndarray:
    """Keep the ceil(fraction * size) largest-magnitude entries; lower flat index wins ties."""
    flat = vector.ravel()
    keep = math.ceil(fraction * flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:keep]] = flat[order[:keep]]
    return out.reshape(vector.shape)


def ties_vector(vectors: Sequence[np.ndarray], fraction: float) -> np.ndarray:
    """Trim, elect sign, disjoint mean. Elements whose trimmed sum is 0 merge to 0."""
    trimmed = np.stack([trim(v, fraction) for v in vectors])
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    count = agree.sum(axis=0)
    summed = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.divide(summed, count, out=np.zeros_like(summed), where=count > 0)


def ties_merge(
    init: Checkpoint, experts: Sequence[Checkpoint], cfg: TiesConfig = TiesConfig(), lam: float = 1.0
) -> Checkpoint:
    if not experts:
        raise InvalidConfigError("ties_merge needs at least one expert")
    vectors = task_vectors(init, experts)
    merged = {name: ties_vector([v[name] for v in vectors], cfg.trim_fraction) for name in init}
    return combine(init, [merged], lam)


def _tensor_rng(seed: int, expert_index: int, name: str) -> np.random.Generator:
    # one stream per (expert, tensor) so tensors can be processed in any order
    return np.random.default_rng([seed, expert_index, zlib.crc32(name.encode("utf-8"))])


def dare_vector(vector: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(vector.shape) >= p
    return np.where(keep, vector * (1.0 / (1.0 - p)), 0.0)


def dare_merge(
    init: Checkpoint, experts: Sequence[Checkpoint], cfg: DareConfig = DareConfig(), lam: float = 1.0
) -> Checkpoint:
    vectors = task_vectors(init, experts)
    dropped = [
        {name: dare_vector(vec, cfg.drop_p, _tensor_rng(cfg.seed, i, name)) for name, vec in v.items()}
        for i, v in enumerate(vectors)
    ]
    return combine(init, dropped, lam)


METHODS = ("average", "task-arith", "ties", "dare")


def run_baseline(
    method: str,
    init: Checkpoint,
    experts: Sequence[Checkpoint],
    lam: float = 1.0,
    trim_fraction: float = 0.2,
    drop_p: float = 0.9,
    seed: int = 0,
) -> Checkpoint:
    if method == "average":
        return weight_average(experts)
    if method == "task-arith":
        return task_arithmetic(init, experts, lam)
    if method == "ties":
        return ties_merge(init, experts, TiesConfig(trim_fraction), lam)
    if method == "dare":
        return dare_merge(init, experts, DareConfig(drop_p, seed), lam)
    raise InvalidConfigError(f"unknown baseline method {method!r}; choose from {', '.join(METHODS)}")
