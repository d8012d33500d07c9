"""Toy experiments: train small dense experts on synthetic tasks, fuse them
with every method, and tabulate held-out losses.

Models are chains of bias-free weight matrices; hidden layers use ReLU and
the output layer is linear. Every task appends a constant 1 feature to its
inputs, which gives the first layer an implicit bias.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import baselines
from .compatibility import analyze_trace, record_trace
from .core import GateConfig, fuse_checkpoints
from .errors import InvalidConfigError, ShapeError, TrainingError
from .tensor_store import Checkpoint, Tensor, TensorRole

TaskKind = Literal["regression-sin", "regression-cos", "binary-a", "binary-b"]
TASK_KINDS = ("regression-sin", "regression-cos", "binary-a", "binary-b")
METHODS = ("graft-channel", "graft-block", "average", "task-arith", "ties", "dare")

_MARGIN = 0.1
_HOLDOUT = 0.2


@dataclass(frozen=True)
class SyntheticTask:
    kind: TaskKind = "regression-sin"
    seed: int = 0
    input_dim: int = 4
    size: int = 256

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidConfigError(f"unknown task kind {self.kind!r}")
        if self.input_dim < 1 or self.size < 5:
            raise InvalidConfigError("task needs input_dim >= 1 and size >= 5")

    @property
    def name(self) -> str:
        return f"{self.kind}/{self.seed}"

    @property
    def is_classification(self) -> bool:
        return self.kind.startswith("binary")

    def direction(self) -> np.ndarray:
        d = self.input_dim
        if self.kind == "binary-a":
            u = np.zeros(d)
            u[0] = 1.0
        elif self.kind == "binary-b":
            u = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
        else:
            u = np.ones(d)
        return u / np.linalg.norm(u)

    def dataset(self) -> tuple[np.ndarray, np.ndarray]:
        """All ``size`` samples as (X with trailing constant column, y)."""
        rng = np.random.default_rng(self.seed)
        x = rng.uniform(-1.0, 1.0, size=(self.size, self.input_dim))
        u = self.direction()
        proj = x @ u
        if self.is_classification:
            sign = np.where(proj >= 0, 1.0, -1.0)
            x = x + np.outer(sign * _MARGIN, u)
            y = sign
        elif self.kind == "regression-sin":
            y = np.sin(np.pi * proj)
        else:
            y = np.cos(np.pi * proj)
        x = np.hstack([x, np.ones((self.size, 1))])
        return x, y

    def split(self) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        x, y = self.dataset()
        cut = self.size - max(1, int(round(self.size * _HOLDOUT)))
        return (x[:cut], y[:cut]), (x[cut:], y[cut:])


@dataclass(frozen=True)
class ExpertSpec:
    task: SyntheticTask = field(default_factory=SyntheticTask)
    hidden: tuple[int, ...] = (16,)
    steps: int = 300
    lr: float = 0.05
    seed: int = 0  # initialization seed; experts sharing it share an init

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not 1 <= len(self.hidden) <= 2 or any(h < 1 for h in self.hidden):
            raise InvalidConfigError("experts take one or two positive hidden widths")
        if self.steps < 0 or not self.lr > 0:
            raise InvalidConfigError("steps must be >= 0 and lr > 0")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.task.input_dim + 1, *self.hidden, 1)


def layer_name(index: int, count: int) -> str:
    return "head" if index == count - 1 else f"layer{index}"


def init_model(spec: ExpertSpec) -> Checkpoint:
    rng = np.random.default_rng(spec.seed)
    sizes = spec.layer_sizes
    count = len(sizes) - 1
    entries = {}
    for i in range(count):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        entries[layer_name(i, count)] = Tensor(w, TensorRole.MLP)
    return Checkpoint(entries)


def forward(weights: Sequence[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Output vector and the list of layer inputs (for backprop)."""
    h = x
    inputs = []
    for i, w in enumerate(weights):
        inputs.append(h)
        h = h @ w.T
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0], inputs


def task_loss(pred: np.ndarray, y: np.ndarray, classification: bool) -> float:
    if classification:
        return float(np.mean(np.maximum(0.0, 1.0 - y * pred)))
    return float(np.mean((pred - y) ** 2))


def _loss_grad(pred: np.ndarray, y: np.ndarray, classification: bool) -> np.ndarray:
    if classification:
        return np.where(1.0 - y * pred > 0, -y, 0.0) / y.size
    return 2.0 * (pred - y) / y.size


def _descend(weights, x, y, cls, spec):
    history = []
    for _ in range(spec.steps):
        pred, inputs = forward(weights, x)
        loss = task_loss(pred, y, cls)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged to {loss}")
        history.append(loss)
        grad_out = _loss_grad(pred, y, cls)[:, None]
        for i in range(len(weights) - 1, -1, -1):
            grad_w = grad_out.T @ inputs[i]
            if i > 0:
                grad_out = (grad_out @ weights[i]) * (inputs[i] > 0)
            weights[i] -= spec.lr * grad_w
    return weights, history


def fit_expert(spec: ExpertSpec) -> tuple[Checkpoint, list[float]]:
    """Full-batch gradient descent; returns the checkpoint and per-step training losses."""
    model = init_model(spec)
    names = model.names()
    weights = [model[n].data.astype(np.float64) for n in names]
    (x, y), _ = spec.task.split()
    cls = spec.task.is_classification
    history = []
    with np.errstate(over="ignore", invalid="ignore"):
        weights, history = _descend(weights, x, y, cls, spec)
    pred, _ = forward(weights, x)
    final = task_loss(pred, y, cls)
    if not np.isfinite(final) or not all(np.isfinite(w).all() for w in weights):
        raise TrainingError(f"training diverged (final loss {final})")
    history.append(final)
    return model.replace(dict(zip(names, weights))), history


def train_expert(spec: ExpertSpec) -> Checkpoint:
    return fit_expert(spec)[0]


def evaluate(model: Checkpoint, task: SyntheticTask) -> float:
    """Mean held-out loss: squared error for regression, hinge for classification."""
    weights = [t.data.astype(np.float64) for _, t in model.items()]
    _, (x, y) = task.split()
    width = x.shape[1]
    for name, w in zip(model.names(), weights):
        if w.shape[1] != width:
            raise ShapeError(f"{name}: expects {w.shape[1]} inputs, got {width}")
        width = w.shape[0]
    if width != 1:
        raise ShapeError(f"model emits {width} outputs, tasks need 1")
    pred, _ = forward(weights, x)
    return task_loss(pred, y, task.is_classification)


@dataclass(frozen=True)
class HarnessOptions:
    """Method settings shared across all pairs of a comparison."""

    gate: GateConfig = field(default_factory=GateConfig)
    lam: float = 1.0
    trim_fraction: float = 0.2
    drop_p: float = 0.9
    seed: int = 0
    trace_samples: int = 16
    epsilon: float = 1e-6


def merge_pair(method: str, a: Checkpoint, b: Checkpoint, init: Checkpoint, opts: HarnessOptions) -> Checkpoint:
    if method == "graft-channel":
        return fuse_checkpoints(a, b, GateConfig(**{**_gate_fields(opts.gate), "granularity": "channel"}))
    if method == "graft-block":
        return fuse_checkpoints(a, b, GateConfig(**{**_gate_fields(opts.gate), "granularity": "block"}))
    if method in baselines.METHODS:
        return baselines.run_baseline(
            method, init, [a, b], lam=opts.lam, trim_fraction=opts.trim_fraction, drop_p=opts.drop_p, seed=opts.seed
        )
    raise InvalidConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def _gate_fields(cfg: GateConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def compatibility_of(model: Checkpoint, task: SyntheticTask, opts: HarnessOptions) -> float:
    _, (x, _) = task.split()
    inputs = list(x[: opts.trace_samples])
    return analyze_trace(record_trace(model, inputs, opts.epsilon)).score


@dataclass
class ComparisonReport:
    name: str
    tasks: tuple[str, str]
    experts: dict[str, dict[str, float]]
    losses: dict[str, dict[str, float]]
    compatibility: dict[str, dict[str, float]]
    seconds: dict[str, float] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock timings live in ``seconds``."""
        return {
            "name": self.name,
            "tasks": list(self.tasks),
            "experts": self.experts,
            "losses": self.losses,
            "compatibility": self.compatibility,
        }


def run_comparison(
    expert_a: ExpertSpec,
    expert_b: ExpertSpec,
    methods: Sequence[str],
    opts: HarnessOptions = HarnessOptions(),
    name: str = "pair",
) -> ComparisonReport:
    if not methods:
        raise InvalidConfigError("run_comparison needs at least one method")
    if len(set(methods)) != len(methods):
        raise InvalidConfigError("methods must be unique")
    if expert_a.seed != expert_b.seed or expert_a.layer_sizes != expert_b.layer_sizes:
        raise InvalidConfigError("experts must share architecture and init seed")
    init = init_model(expert_a)
    a, b = train_expert(expert_a), train_expert(expert_b)
    tasks = (expert_a.task, expert_b.task)
    task_names = (f"a:{tasks[0].name}", f"b:{tasks[1].name}")

    report = ComparisonReport(
        name=name,
        tasks=task_names,
        experts={
            label: {tn: evaluate(model, t) for tn, t in zip(task_names, tasks)}
            for label, model in (("a", a), ("b", b))
        },
        losses={},
        compatibility={
            label: {tn: compatibility_of(model, t, opts) for tn, t in zip(task_names, tasks)}
            for label, model in (("a", a), ("b", b))
        },
    )
    for method in methods:
        start = time.perf_counter()
        fused = merge_pair(method, a, b, init, opts)
        report.losses[method] = {tn: evaluate(fused, t) for tn, t in zip(task_names, tasks)}
        report.seconds[method] = time.perf_counter() - start
    return report


def reports_to_csv(reports: Sequence[ComparisonReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair", "method", "task_a", "loss_a", "task_b", "loss_b"])
    for rep in reports:
        for method, row in rep.losses.items():
            writer.writerow([rep.name, method, rep.tasks[0], repr(row[rep.tasks[0]]), rep.tasks[1], repr(row[rep.tasks[1]])])
    return buf.getvalue()


def spec_to_dict(spec: ExpertSpec) -> dict:
    d = asdict(spec)
    d["hidden"] = list(spec.hidden)
    return d


def spec_from_dict(data: dict) -> ExpertSpec:
    data = dict(data)
    allowed = {"task", "hidden", "steps", "lr", "seed"}
    unknown = set(data) - allowed
    if unknown:
        raise InvalidConfigError(f"unknown expert keys: {sorted(unknown)}")
    task = data.pop("task", {})
    task_unknown = set(task) - {"kind", "seed", "input_dim", "size"}
    if task_unknown:
        raise InvalidConfigError(f"unknown task keys: {sorted(task_unknown)}")
    return ExpertSpec(task=SyntheticTask(**task), **data)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"
