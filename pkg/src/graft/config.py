"""JSON configuration for the command-line tool and the benchmark harness.

Every section is optional; missing keys take defaults and unknown keys are
rejected with :class:`InvalidConfigError`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Any

from . import harness
from .baselines import METHODS as BASELINE_METHODS
from .compatibility import DEFAULT_EPSILON, DEFAULT_THRESHOLD
from .core import GateConfig, GatingNet
from .errors import GraftError, InvalidConfigError


@dataclass(frozen=True)
class CompatConfig:
    epsilon: float = DEFAULT_EPSILON
    threshold: float = DEFAULT_THRESHOLD
    enforce: bool = False


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "average"
    lam: float = 1.0
    trim_fraction: float = 0.2
    drop_p: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class CliConfig:
    gate: GateConfig = field(default_factory=GateConfig)
    compat: CompatConfig = field(default_factory=CompatConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    io: dict[str, Any] = field(default_factory=dict)


def _section(data: Any, name: str, allowed: set[str]) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidConfigError(f"section {name!r} must be an object")
    unknown = set(data) - allowed
    if unknown:
        raise InvalidConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return data


def _number(value: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidConfigError(f"{key} must be a number, got {value!r}")
    return float(value)


def _integer(value: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidConfigError(f"{key} must be an integer, got {value!r}")
    return value


_GATE_KEYS = {"a", "c", "bins", "granularity", "block_size", "layer_filter", "gating", "prefactor"}


def parse_gate(data: Any) -> GateConfig:
    d = _section(data, "gate", _GATE_KEYS)
    net = _section(d.get("gating"), "gate.gating", {"alpha", "beta"})
    defaults = GateConfig()
    return GateConfig(
        a=_number(d.get("a", defaults.a), "gate.a"),
        c=_number(d.get("c", defaults.c), "gate.c"),
        bins=_integer(d.get("bins", defaults.bins), "gate.bins"),
        granularity=d.get("granularity", defaults.granularity),
        block_size=_integer(d.get("block_size", defaults.block_size), "gate.block_size"),
        layer_filter=d.get("layer_filter", defaults.layer_filter),
        gate_net=GatingNet(
            _number(net.get("alpha", defaults.gate_net.alpha), "gate.gating.alpha"),
            _number(net.get("beta", defaults.gate_net.beta), "gate.gating.beta"),
        ),
        prefactor=d.get("prefactor", defaults.prefactor),
    )


def gate_to_dict(cfg: GateConfig) -> dict:
    return {
        "a": cfg.a,
        "c": cfg.c,
        "bins": cfg.bins,
        "granularity": cfg.granularity,
        "block_size": cfg.block_size,
        "layer_filter": cfg.layer_filter,
        "gating": {"alpha": cfg.gate_net.alpha, "beta": cfg.gate_net.beta},
        "prefactor": cfg.prefactor,
    }


def parse_compat(data: Any) -> CompatConfig:
    d = _section(data, "compat", {"epsilon", "threshold", "enforce"})
    epsilon = _number(d.get("epsilon", DEFAULT_EPSILON), "compat.epsilon")
    if not epsilon > 0:
        raise InvalidConfigError("compat.epsilon must be positive")
    enforce = d.get("enforce", False)
    if not isinstance(enforce, bool):
        raise InvalidConfigError("compat.enforce must be a boolean")
    return CompatConfig(epsilon, _number(d.get("threshold", DEFAULT_THRESHOLD), "compat.threshold"), enforce)


def parse_baseline(data: Any) -> BaselineConfig:
    d = _section(data, "baseline", {"method", "lambda", "trim_fraction", "drop_p", "seed"})
    cfg = BaselineConfig(
        method=d.get("method", "average"),
        lam=_number(d.get("lambda", 1.0), "baseline.lambda"),
        trim_fraction=_number(d.get("trim_fraction", 0.2), "baseline.trim_fraction"),
        drop_p=_number(d.get("drop_p", 0.9), "baseline.drop_p"),
        seed=_integer(d.get("seed", 0), "baseline.seed"),
    )
    if cfg.method not in BASELINE_METHODS:
        raise InvalidConfigError(f"unknown baseline method {cfg.method!r}")
    if not 0 < cfg.trim_fraction <= 1:
        raise InvalidConfigError("baseline.trim_fraction must lie in (0, 1]")
    if not 0 <= cfg.drop_p < 1:
        raise InvalidConfigError("baseline.drop_p must lie in [0, 1)")
    return cfg


def baseline_to_dict(cfg: BaselineConfig) -> dict:
    return {"method": cfg.method, "lambda": cfg.lam, "trim_fraction": cfg.trim_fraction, "drop_p": cfg.drop_p, "seed": cfg.seed}


def read_json(path: str | os.PathLike) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config {path} is not valid JSON: {exc}") from None


def parse_cli_config(data: Any) -> CliConfig:
    d = _section(data, "config", {"gate", "compat", "baseline", "io"})
    io = _section(d.get("io"), "io", {"paths", "out"})
    try:
        return CliConfig(parse_gate(d.get("gate")), parse_compat(d.get("compat")), parse_baseline(d.get("baseline")), dict(io))
    except GraftError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(str(exc)) from None


def load_cli_config(path: str | os.PathLike | None) -> CliConfig:
    return CliConfig() if path is None else parse_cli_config(read_json(path))


def cli_config_to_dict(cfg: CliConfig) -> dict:
    return {
        "gate": gate_to_dict(cfg.gate),
        "compat": {"epsilon": cfg.compat.epsilon, "threshold": cfg.compat.threshold, "enforce": cfg.compat.enforce},
        "baseline": baseline_to_dict(cfg.baseline),
        "io": cfg.io,
    }


# --- benchmark harness configuration -------------------------------------------------


@dataclass(frozen=True)
class PairSpec:
    name: str
    a: harness.ExpertSpec
    b: harness.ExpertSpec


@dataclass(frozen=True)
class BenchConfig:
    pairs: tuple[PairSpec, ...]
    methods: tuple[str, ...]
    options: harness.HarnessOptions


def _expert(kind: str, task_seed: int) -> dict:
    return {
        "task": {"kind": kind, "seed": task_seed, "input_dim": 4, "size": 256},
        "hidden": [16, 16],
        "steps": 400,
        "lr": 0.05,
        "seed": 0,
    }


DEFAULT_BENCH = {
    "pairs": [
        {"name": "sin-cos", "a": _expert("regression-sin", 1), "b": _expert("regression-cos", 2)},
        {"name": "class-a-b", "a": _expert("binary-a", 3), "b": _expert("binary-b", 4)},
    ],
    "methods": list(harness.METHODS),
    "trace_samples": 16,
}


def parse_bench_config(data: Any) -> BenchConfig:
    d = _section(data, "bench", {"pairs", "methods", "trace_samples", "gate", "compat", "baseline"})
    merged = {**DEFAULT_BENCH, **d}
    pairs_raw = merged["pairs"]
    if not isinstance(pairs_raw, list) or not pairs_raw:
        raise InvalidConfigError("bench.pairs must be a non-empty list")
    pairs = []
    try:
        for i, p in enumerate(pairs_raw):
            p = _section(p, f"pairs[{i}]", {"name", "a", "b"})
            if "a" not in p or "b" not in p:
                raise InvalidConfigError(f"pairs[{i}] needs experts 'a' and 'b'")
            pairs.append(PairSpec(str(p.get("name", f"pair{i}")), harness.spec_from_dict(p["a"]), harness.spec_from_dict(p["b"])))
        methods = merged["methods"]
        if not isinstance(methods, list) or not methods or len(set(methods)) != len(methods):
            raise InvalidConfigError("bench.methods must be a non-empty list of unique names")
        for m in methods:
            if m not in harness.METHODS:
                raise InvalidConfigError(f"unknown method {m!r}; choose from {', '.join(harness.METHODS)}")
        names = [p.name for p in pairs]
        if len(set(names)) != len(names):
            raise InvalidConfigError("pair names must be unique")
        gate = parse_gate(merged.get("gate"))
        compat = parse_compat(merged.get("compat"))
        base = parse_baseline(merged.get("baseline"))
        trace_samples = _integer(merged.get("trace_samples", 16), "bench.trace_samples")
        if trace_samples < 1:
            raise InvalidConfigError("bench.trace_samples must be >= 1")
    except GraftError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(str(exc)) from None
    options = harness.HarnessOptions(
        gate=gate,
        lam=base.lam,
        trim_fraction=base.trim_fraction,
        drop_p=base.drop_p,
        seed=base.seed,
        trace_samples=trace_samples,
        epsilon=compat.epsilon,
    )
    return BenchConfig(tuple(pairs), tuple(methods), options)


def bench_config_to_dict(cfg: BenchConfig) -> dict:
    o = cfg.options
    return {
        "pairs": [{"name": p.name, "a": harness.spec_to_dict(p.a), "b": harness.spec_to_dict(p.b)} for p in cfg.pairs],
        "methods": list(cfg.methods),
        "trace_samples": o.trace_samples,
        "gate": gate_to_dict(o.gate),
        "compat": {"epsilon": o.epsilon},
        "baseline": {"lambda": o.lam, "trim_fraction": o.trim_fraction, "drop_p": o.drop_p, "seed": o.seed},
    }


def with_overrides(cfg: GateConfig, **kwargs: Any) -> GateConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
