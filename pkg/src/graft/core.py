"""Dual-gate parameter fusion.

A base and a graft weight matrix are combined per fusion unit (an output
row, or a k x k block) with weights derived from two gates:

* local gate: sigmoid of an affine map of the unit's total absolute
  difference between base and graft;
* global gate: arctan of the histogram-entropy gap between the two
  matrices, scaled into (1/2 - a/2, 1/2 + a/2).

The gates are mixed through saturating exponentials and a two-way
softmax, then the fused matrix is ``w_b * base + w_g * graft``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidValueError, ObjectiveError, PairingError, ShapeError
from .tensor_store import Checkpoint, TensorRole, lora_pairs, validate_pair

Granularity = Literal["channel", "block"]
LayerFilter = Literal["all", "attn", "mlp"]

FOLD_ORDER_KEY = "graft.fold_order"

_FILTER_ROLES: dict[str, tuple[TensorRole, ...] | None] = {
    "all": None,
    "attn": (TensorRole.ATTENTION,),
    "mlp": (TensorRole.MLP,),
}


@dataclass(frozen=True)
class GatingNet:
    """Per-unit affine map ``alpha * d + beta`` feeding the local sigmoid."""

    alpha: float = 1.0
    beta: float = 0.0

    @classmethod
    def neutral(cls) -> "GatingNet":
        """Gate that outputs 0.5 for every unit."""
        return cls(0.0, 0.0)

    def validate(self) -> None:
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise InvalidConfigError(f"gating net parameters must be finite, got {self}")


@dataclass(frozen=True)
class GateConfig:
    a: float = 0.4
    c: float = 500.0
    bins: int = 10
    granularity: Granularity = "channel"
    block_size: int = 8
    layer_filter: LayerFilter = "all"
    gate_net: GatingNet = field(default_factory=GatingNet)
    # "pi" uses a/pi in front of the arctan; "c" uses a/c for reproduction studies.
    prefactor: Literal["pi", "c"] = "pi"

    def __post_init__(self):
        if not (0 < self.a <= math.pi):
            raise InvalidConfigError(f"a must lie in (0, pi], got {self.a}")
        if not (self.c > 0 and math.isfinite(self.c)):
            raise InvalidConfigError(f"c must be positive, got {self.c}")
        if isinstance(self.bins, bool) or not isinstance(self.bins, int) or self.bins < 2:
            raise InvalidConfigError(f"bins must be an integer >= 2, got {self.bins}")
        if self.granularity not in ("channel", "block"):
            raise InvalidConfigError(f"unknown granularity {self.granularity!r}")
        if isinstance(self.block_size, bool) or not isinstance(self.block_size, int) or self.block_size < 1:
            raise InvalidConfigError(f"block_size must be an integer >= 1, got {self.block_size}")
        if self.layer_filter not in _FILTER_ROLES:
            raise InvalidConfigError(f"unknown layer filter {self.layer_filter!r}")
        if self.prefactor not in ("pi", "c"):
            raise InvalidConfigError(f"unknown prefactor {self.prefactor!r}")
        self.gate_net.validate()

    def with_net(self, net: GatingNet) -> "GateConfig":
        return replace(self, gate_net=net)


@dataclass(frozen=True)
class FusionWeights:
    """Gate outputs for one matrix pair.

    ``w_local``, ``w_b`` and ``w_g`` share the unit grid: shape (M,) for
    channel granularity, (ceil(M/k), ceil(N/k)) for blocks.
    """

    w_local: np.ndarray
    w_global: float
    w_b: np.ndarray
    w_g: np.ndarray


def _as_pair(base, graft) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(base, dtype=np.float64)
    g = np.asarray(graft, dtype=np.float64)
    if b.ndim != 2 or b.shape != g.shape:
        raise ShapeError(f"cannot pair shapes {b.shape} and {g.shape}")
    if b.size == 0:
        raise ShapeError("empty matrix")
    return b, g


def channel_diff(base, graft) -> np.ndarray:
    """Per-row total absolute difference, length M."""
    b, g = _as_pair(base, graft)
    return np.abs(b - g).sum(axis=1)


def _block_edges(length: int, k: int) -> list[tuple[int, int]]:
    return [(start, min(start + k, length)) for start in range(0, length, k)]


def block_diff(base, graft, k: int) -> np.ndarray:
    """Total absolute difference per k x k block; edge blocks may be smaller."""
    b, g = _as_pair(base, graft)
    diff = np.abs(b - g)
    rows, cols = _block_edges(b.shape[0], k), _block_edges(b.shape[1], k)
    out = np.empty((len(rows), len(cols)))
    for bi, (r0, r1) in enumerate(rows):
        for bj, (c0, c1) in enumerate(cols):
            # ravel first so a single k x k block sums in the same order as a 1 x k^2 row
            out[bi, bj] = diff[r0:r1, c0:c1].ravel().sum()
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def local_gate(d, net: GatingNet) -> np.ndarray:
    net.validate()
    return _sigmoid(net.alpha * np.asarray(d, dtype=np.float64) + net.beta)


def weight_entropy(w, n: int) -> float:
    """Shannon entropy (nats) of an n-bin histogram over [min(w), max(w)]."""
    if n < 2:
        raise InvalidConfigError(f"bin count must be >= 2, got {n}")
    values = np.asarray(w, dtype=np.float64).ravel()
    if values.size == 0:
        raise ShapeError("entropy of an empty matrix")
    lo, hi = values.min(), values.max()
    if lo == hi:
        return 0.0
    idx = np.floor((values - lo) / (hi - lo) * n).astype(np.int64)
    np.clip(idx, 0, n - 1, out=idx)
    p = np.bincount(idx, minlength=n) / values.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def global_gate(h_base: float, h_graft: float, a: float, c: float, prefactor: str = "pi") -> float:
    scale = a / math.pi if prefactor == "pi" else a / c
    return scale * math.atan(c * (h_base - h_graft)) + 0.5


def dual_gate_weights(w_local, w_global: float) -> FusionWeights:
    w_local = np.asarray(w_local, dtype=np.float64)
    # closed interval on w_local: the sigmoid saturates to exactly 1.0 for large differences
    if not np.all((w_local >= 0.0) & (w_local <= 1.0)):
        raise InvalidValueError("local gate values must lie in [0, 1]")
    if not (0.0 < w_global < 1.0):
        raise InvalidValueError(f"global gate must lie in (0, 1), got {w_global}")
    pre_b = w_global * (1.0 - np.exp(-w_global * w_local))
    pre_g = (1.0 - w_global) * (1.0 - np.exp(-(1.0 - w_global) * (1.0 - w_local)))
    # both logits live in [0, 1): no max-shift needed
    e_b, e_g = np.exp(pre_b), np.exp(pre_g)
    total = e_b + e_g
    return FusionWeights(w_local=w_local, w_global=w_global, w_b=e_b / total, w_g=e_g / total)


def gate_weights(base, graft, cfg: GateConfig) -> FusionWeights:
    b, g = _as_pair(base, graft)
    if cfg.granularity == "channel":
        d = channel_diff(b, g)
    else:
        d = block_diff(b, g, cfg.block_size)
    w_local = local_gate(d, cfg.gate_net)
    w_global = global_gate(
        weight_entropy(b, cfg.bins), weight_entropy(g, cfg.bins), cfg.a, cfg.c, cfg.prefactor
    )
    return dual_gate_weights(w_local, w_global)


def _expand(unit_weights: np.ndarray, shape: tuple[int, int], cfg: GateConfig) -> np.ndarray:
    if cfg.granularity == "channel":
        return np.broadcast_to(unit_weights[:, None], shape)
    k = cfg.block_size
    full = np.repeat(np.repeat(unit_weights, k, axis=0), k, axis=1)
    return full[: shape[0], : shape[1]]


def fuse_matrix(base, graft, cfg: GateConfig) -> np.ndarray:
    """Fused float32 matrix; each entry is a convex combination of base and graft."""
    b, g = _as_pair(base, graft)
    weights = gate_weights(b, g, cfg)
    fused = _expand(weights.w_b, b.shape, cfg) * b + _expand(weights.w_g, b.shape, cfg) * g
    return fused.astype(np.float32)


def fuse_matrix_blockwise(base, graft, cfg: GateConfig, block_size: int | None = None) -> np.ndarray:
    cfg = replace(cfg, granularity="block", block_size=block_size or cfg.block_size)
    return fuse_matrix(base, graft, cfg)


def _selected(role: TensorRole, layer_filter: str) -> bool:
    roles = _FILTER_ROLES[layer_filter]
    return roles is None or role in roles


def fuse_checkpoints(base: Checkpoint, graft: Checkpoint, cfg: GateConfig) -> Checkpoint:
    """Fuse every name-matched tensor the layer filter selects.

    Unselected tensors and tensors only present in ``base`` are copied
    from base; tensors only present in ``graft`` are dropped. Output keeps
    base's order and metadata.
    """
    report = validate_pair(base, graft)
    mismatched = {name for name, _, _ in report.mismatched}
    updates = {}
    for name, tensor in base.items():
        if name not in graft or not _selected(tensor.role, cfg.layer_filter):
            continue
        if name in mismatched:
            raise ShapeError(f"{name}: base {tensor.shape} vs graft {graft[name].shape}")
        updates[name] = fuse_matrix(tensor.data, graft[name].data, cfg)
    return base.replace(updates)


def fuse_lora(base: Checkpoint, graft: Checkpoint, cfg: GateConfig) -> Checkpoint:
    """Fuse LoRA factors independently: A with A, B with B.

    Both sides must pair every adapter, and the adapter sets must agree.
    """
    base_pairs, graft_pairs = lora_pairs(base), lora_pairs(graft)
    for adapter in base_pairs.keys() ^ graft_pairs.keys():
        side = "graft" if adapter in base_pairs else "base"
        raise PairingError(adapter, f"adapter missing from {side}")
    updates = {}
    for adapter, names in base_pairs.items():
        for base_name, graft_name in zip(names, graft_pairs[adapter]):
            b, g = base[base_name].data, graft[graft_name].data
            if b.shape != g.shape:
                raise ShapeError(f"{base_name}: base {b.shape} vs graft {g.shape}")
            updates[base_name] = fuse_matrix(b, g, cfg)
    return base.replace(updates)


def fuse_many(
    experts: Sequence[Checkpoint],
    cfg: GateConfig,
    names: Sequence[str] | None = None,
    lora: bool = False,
) -> Checkpoint:
    """Left fold: ``fuse(fuse(e1, e2), e3) ...``.

    With three or more experts the fold order is recorded under the
    ``FOLD_ORDER_KEY`` metadata entry.
    """
    if len(experts) < 2:
        raise InvalidConfigError("fuse_many needs at least two experts")
    fuse = fuse_lora if lora else fuse_checkpoints
    result = experts[0]
    for expert in experts[1:]:
        result = fuse(result, expert, cfg)
    if len(experts) > 2:
        order = list(names) if names is not None else [str(i) for i in range(len(experts))]
        result = result.with_metadata(**{FOLD_ORDER_KEY: json.dumps(order)})
    return result


def gate_summary(base: Checkpoint, graft: Checkpoint, cfg: GateConfig, lora: bool = False) -> dict[str, tuple[float, float]]:
    """Per fused tensor: (w_global, mean w_local)."""
    if lora:
        names = [n for pair in lora_pairs(base).values() for n in pair]
    else:
        names = [n for n, t in base.items() if n in graft and _selected(t.role, cfg.layer_filter)]
    out = {}
    for name in names:
        w = gate_weights(base[name].data, graft[name].data, cfg)
        out[name] = (w.w_global, float(np.mean(w.w_local)))
    return out


def tune_gating_net(
    objective: Callable[[Checkpoint], float],
    base: Checkpoint,
    graft: Checkpoint,
    cfg: GateConfig,
    budget: int = 32,
    seed: int = 0,
    step: float = 1.0,
    lora: bool = False,
) -> GatingNet:
    """Seeded coordinate search over (alpha, beta) minimizing ``objective``.

    Each iteration evaluates one proposal: a random coordinate moved by
    its current step in a random direction. Improvements are accepted and
    grow the step; failures halve it. Only strict improvements move the
    net, so a flat objective returns ``cfg.gate_net`` unchanged.
    """
    if budget < 1:
        raise InvalidConfigError(f"budget must be >= 1, got {budget}")
    fuse = fuse_lora if lora else fuse_checkpoints

    def evaluate(net: GatingNet) -> float:
        value = float(objective(fuse(base, graft, cfg.with_net(net))))
        if not math.isfinite(value):
            raise ObjectiveError(f"objective returned {value} for {net}")
        return value

    rng = np.random.default_rng(seed)
    best = cfg.gate_net
    best_value = evaluate(best)
    steps = [step, step]
    for _ in range(budget):
        coord = int(rng.integers(2))
        direction = 1.0 if rng.random() < 0.5 else -1.0
        params = [best.alpha, best.beta]
        params[coord] += direction * steps[coord]
        candidate = GatingNet(*params)
        value = evaluate(candidate)
        if value < best_value:
            best, best_value = candidate, value
            steps[coord] *= 2.0
        else:
            steps[coord] *= 0.5
    return best
