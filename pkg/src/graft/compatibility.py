"""Activation-based compatibility of a model with a dataset.

Per traced module we measure mean magnitude, sparsity and variance of its
activations over K samples, normalize each metric across modules with
min-max scaling, and average the normalized sensitivities
``mu' * (1 - s') * sqrt(v')`` into one score in [0, 1].
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidTraceError, ShapeError
from .tensor_store import Checkpoint, Tensor, TensorRole

DEFAULT_EPSILON = 1e-6
DEFAULT_THRESHOLD = 0.25


@dataclass
class ActivationTrace:
    modules: dict[str, list[np.ndarray]]
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.modules:
            raise InvalidTraceError("trace has no modules")
        ks = set()
        for name, samples in self.modules.items():
            if not samples:
                raise InvalidTraceError(f"{name}: no samples")
            arrays = [np.asarray(s, dtype=np.float64) for s in samples]
            if any(a.ndim != 2 or a.size == 0 for a in arrays):
                raise InvalidTraceError(f"{name}: samples must be non-empty B x D matrices")
            if len({a.shape[1] for a in arrays}) != 1:
                raise InvalidTraceError(f"{name}: samples disagree on activation dim")
            if not all(np.isfinite(a).all() for a in arrays):
                raise InvalidTraceError(f"{name}: non-finite activation")
            self.modules[name] = arrays
            ks.add(len(arrays))
        if len(ks) != 1:
            raise InvalidTraceError(f"modules disagree on sample count K: {sorted(ks)}")

    @property
    def k(self) -> int:
        return len(next(iter(self.modules.values())))

    def to_checkpoint(self) -> Checkpoint:
        """Stack each module's samples into one (sum B) x D tensor."""
        entries = {name: Tensor(np.vstack(samples), TensorRole.OTHER) for name, samples in self.modules.items()}
        batches = {name: [s.shape[0] for s in samples] for name, samples in self.modules.items()}
        metadata = {
            "trace.K": str(self.k),
            "trace.batch_sizes": json.dumps(batches, separators=(",", ":")),
            "trace.epsilon": repr(self.epsilon),
        }
        return Checkpoint(entries, metadata)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, epsilon: float | None = None) -> "ActivationTrace":
        meta = ckpt.metadata
        try:
            k = int(meta["trace.K"])
            batches = json.loads(meta["trace.batch_sizes"])
        except (KeyError, ValueError) as exc:
            raise InvalidTraceError(f"missing or malformed trace metadata: {exc}") from None
        if epsilon is None:
            epsilon = float(meta.get("trace.epsilon", DEFAULT_EPSILON))
        modules = {}
        for name, tensor in ckpt.items():
            sizes = batches.get(name) if isinstance(batches, dict) else None
            if not isinstance(sizes, list) or len(sizes) != k or sum(sizes) != tensor.shape[0]:
                raise InvalidTraceError(f"{name}: batch sizes {sizes!r} do not split {tensor.shape[0]} rows into {k}")
            if any(not isinstance(b, int) or b < 1 for b in sizes):
                raise InvalidTraceError(f"{name}: batch sizes must be positive integers")
            bounds = np.cumsum([0, *sizes])
            modules[name] = [tensor.data[bounds[i] : bounds[i + 1]] for i in range(k)]
        return cls(modules, epsilon)


@dataclass(frozen=True)
class ModuleStats:
    mu: float
    s: float
    v: float

    @property
    def rho(self) -> float:
        return sensitivity(self.mu, self.s, self.v)


def sensitivity(mu: float, s: float, v: float) -> float:
    return mu * (1.0 - s) * math.sqrt(v)


class Verdict(str, enum.Enum):
    FUSABLE = "Fusable"
    NOT_RECOMMENDED = "NotRecommended"


@dataclass
class CompatibilityReport:
    raw: dict[str, ModuleStats]
    normalized: dict[str, ModuleStats]
    score: float
    threshold: float
    verdict: Verdict = field(init=False)

    def __post_init__(self):
        self.verdict = threshold_verdict(self.score, self.threshold)

    def to_dict(self) -> dict:
        def row(st: ModuleStats) -> dict:
            return {"mu": st.mu, "s": st.s, "v": st.v, "rho": st.rho}

        return {
            "modules": {name: {"raw": row(self.raw[name]), "normalized": row(self.normalized[name])} for name in self.raw},
            "score": self.score,
            "threshold": self.threshold,
            "verdict": self.verdict.value,
        }


def module_stats(acts: Sequence[np.ndarray], epsilon: float = DEFAULT_EPSILON) -> ModuleStats:
    if len(acts) == 0:
        raise InvalidTraceError("module has no activation samples")
    if not epsilon > 0:
        raise InvalidTraceError(f"epsilon must be positive, got {epsilon}")
    mu = s = v = 0.0
    for a in acts:
        a = np.asarray(a, dtype=np.float64)
        mu += np.abs(a).sum() / a.size
        s += np.count_nonzero(np.abs(a) < epsilon) / a.size
        v += a.var()
    k = len(acts)
    return ModuleStats(float(mu / k), float(s / k), float(v / k))


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def normalize_across_modules(stats: Mapping[str, ModuleStats]) -> dict[str, ModuleStats]:
    """Min-max scale mu, s and v across modules; a constant metric maps to 0."""
    names = list(stats)
    cols = {attr: _minmax(np.array([getattr(stats[n], attr) for n in names])) for attr in ("mu", "s", "v")}
    return {n: ModuleStats(float(cols["mu"][i]), float(cols["s"][i]), float(cols["v"][i])) for i, n in enumerate(names)}


def compatibility_score(normalized: Mapping[str, ModuleStats]) -> float:
    return float(np.mean([st.rho for st in normalized.values()]))


def threshold_verdict(score: float, threshold: float) -> Verdict:
    return Verdict.FUSABLE if score > threshold else Verdict.NOT_RECOMMENDED


def analyze_trace(trace: ActivationTrace, threshold: float = DEFAULT_THRESHOLD) -> CompatibilityReport:
    raw = {name: module_stats(samples, trace.epsilon) for name, samples in trace.modules.items()}
    normalized = normalize_across_modules(raw)
    return CompatibilityReport(raw, normalized, compatibility_score(normalized), threshold)


def record_trace(model: Checkpoint, inputs: Sequence[np.ndarray], epsilon: float = DEFAULT_EPSILON) -> ActivationTrace:
    """Run ``model`` as a chain of bias-free dense layers with ReLU after every layer.

    Each input is a length-N vector (traced as a 1 x N batch) or a B x N
    batch. Layer ``W`` (M x N) maps a batch ``X`` to ``max(0, X @ W.T)``.
    """
    if not inputs:
        raise InvalidTraceError("record_trace needs at least one input")
    layers = list(model.items())
    if not layers:
        raise ShapeError("model has no layers")
    width = layers[0][1].shape[1]
    for name, tensor in layers:
        if tensor.shape[1] != width:
            raise ShapeError(f"{name}: expects {tensor.shape[1]} inputs, previous layer gives {width}")
        width = tensor.shape[0]

    modules: dict[str, list[np.ndarray]] = {name: [] for name, _ in layers}
    for x in inputs:
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if h.ndim != 2 or h.shape[1] != layers[0][1].shape[1]:
            raise ShapeError(f"input shape {np.shape(x)} does not match first layer width {layers[0][1].shape[1]}")
        for name, tensor in layers:
            h = np.maximum(h @ tensor.data.astype(np.float64).T, 0.0)
            modules[name].append(h)
    return ActivationTrace(modules, epsilon)
