"""``graft`` command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 configuration error.
Logging goes to stderr at the level named by ``GRAFT_LOG`` (quiet, info,
debug); command results go to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import harness
from .baselines import METHODS as BASELINE_METHODS
from .baselines import run_baseline
from .compatibility import ActivationTrace, Verdict, analyze_trace
from .core import FOLD_ORDER_KEY, fuse_checkpoints, fuse_lora, gate_summary
from .errors import GraftError, InvalidConfigError
from .tensor_store import load_checkpoint, read_header, save_checkpoint, validate_pair

log = logging.getLogger("graft")

_LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
_LAYER_FLAGS = {"all": "all", "attn": "attn", "mlp": "mlp"}


def _configure_logging() -> None:
    level_name = os.environ.get("GRAFT_LOG", "quiet").lower()
    level = _LOG_LEVELS.get(level_name, logging.WARNING)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
    log.setLevel(level)


def _resolve_out(args: argparse.Namespace, cfg: cfgmod.CliConfig) -> str:
    out = args.out or cfg.io.get("out")
    if not out:
        raise InvalidConfigError("an output path is required (--out or io.out)")
    return out


def cmd_merge(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_cli_config(args.config)
    gate = cfgmod.with_overrides(
        cfg.gate,
        granularity=args.granularity,
        block_size=args.block_size,
        layer_filter=_LAYER_FLAGS.get(args.layers) if args.layers else None,
    )
    out = _resolve_out(args, cfg)
    paths = [args.base, *args.grafts]
    experts = [load_checkpoint(p) for p in paths]
    log.info("loaded %d checkpoints", len(experts))

    fuse = fuse_lora if args.lora else fuse_checkpoints
    acc = experts[0]
    for path, graft in zip(paths[1:], experts[1:]):
        if not args.lora:
            report = validate_pair(acc, graft)
            for name in report.only_a:
                log.info("%s: not in %s, copied from base", name, path)
        print(f"# fuse {path}")
        for name, (w_global, w_local) in gate_summary(acc, graft, gate, lora=args.lora).items():
            print(f"{name}\tw_global={w_global:.6f}\tmean_w_local={w_local:.6f}")
        acc = fuse(acc, graft, gate)
    if len(experts) > 2:
        acc = acc.with_metadata(**{FOLD_ORDER_KEY: json.dumps(paths)})
    save_checkpoint(acc, out)
    log.info("wrote %s", out)
    return 0


def _looks_like_method(arg: str) -> bool:
    if arg in BASELINE_METHODS:
        return True
    return not os.path.exists(arg) and not any(ch in arg for ch in "./\\")


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_cli_config(args.config)
    paths = list(args.paths)
    method = args.method
    if method is None and paths and _looks_like_method(paths[0]):
        method = paths.pop(0)
    method = method or cfg.baseline.method
    if method not in BASELINE_METHODS:
        raise InvalidConfigError(f"unknown method {method!r}; choose from {', '.join(BASELINE_METHODS)}")
    if len(paths) < 2:
        raise InvalidConfigError("baseline needs an init checkpoint and at least one expert")
    out = _resolve_out(args, cfg)
    b = cfg.baseline
    lam = b.lam if args.lam is None else args.lam
    seed = b.seed if args.seed is None else args.seed
    init = load_checkpoint(paths[0])
    experts = [load_checkpoint(p) for p in paths[1:]]
    merged = run_baseline(method, init, experts, lam=lam, trim_fraction=b.trim_fraction, drop_p=b.drop_p, seed=seed)
    save_checkpoint(merged, out)
    log.info("%s merge of %d experts written to %s", method, len(experts), out)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = cfgmod.load_cli_config(args.config)
    trace = ActivationTrace.from_checkpoint(load_checkpoint(args.trace), epsilon=cfg.compat.epsilon)
    report = analyze_trace(trace, cfg.compat.threshold)
    print(f"{'module':<24} {'mu':>10} {'s':>10} {'v':>10} {'rho':>10} {'rho_norm':>10}")
    for name, st in report.raw.items():
        norm = report.normalized[name]
        print(f"{name:<24} {st.mu:>10.4g} {st.s:>10.4g} {st.v:>10.4g} {st.rho:>10.4g} {norm.rho:>10.3f}")
    print(f"compatibility {report.score:.3f} threshold {report.threshold:.3f} verdict {report.verdict.value}")
    if args.enforce or cfg.compat.enforce:
        return 0 if report.verdict is Verdict.FUSABLE else 1
    return 0


def write_bench(bench: cfgmod.BenchConfig, out_dir: Path) -> list[harness.ComparisonReport]:
    reports = [harness.run_comparison(p.a, p.b, bench.methods, bench.options, name=p.name) for p in bench.pairs]
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfgmod.bench_config_to_dict(bench), "pairs": [r.to_dict() for r in reports]}
    (out_dir / "report.json").write_text(harness.dumps_json(payload), encoding="utf-8")
    (out_dir / "report.csv").write_text(harness.reports_to_csv(reports), encoding="utf-8")
    timings = {r.name: r.seconds for r in reports}
    (out_dir / "timings.json").write_text(harness.dumps_json(timings), encoding="utf-8")
    return reports


def cmd_bench(args: argparse.Namespace) -> int:
    source = args.bench_config or args.config
    data = cfgmod.read_json(source) if source else {}
    bench = cfgmod.parse_bench_config(data)
    out = args.out or "bench-out"
    reports = write_bench(bench, Path(out))
    for rep in reports:
        for method, row in rep.losses.items():
            cells = "\t".join(f"{task}={loss:.4f}" for task, loss in row.items())
            print(f"{rep.name}\t{method}\t{cells}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    print(json.dumps(read_header(args.path), indent=2))
    return 0


def cmd_diff(args: argparse.Namespace) -> int:
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    report = validate_pair(a, b)
    for name in report.fusable:
        delta = np.abs(a[name].data.astype(np.float64) - b[name].data.astype(np.float64)).max()
        print(f"{name}\t{delta:.9g}")
    for name, sa, sb in report.mismatched:
        print(f"{name}\tshape {sa[0]}x{sa[1]} vs {sb[0]}x{sb[1]}")
    for name in report.only_a:
        print(f"{name}\tonly in {args.a}")
    for name in report.only_b:
        print(f"{name}\tonly in {args.b}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output path")

    parser = argparse.ArgumentParser(prog="graft", description="Dual-gate checkpoint fusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", parents=[common], help="fuse a base checkpoint with one or more grafts")
    p.add_argument("base")
    p.add_argument("grafts", nargs="+")
    p.add_argument("--granularity", choices=["channel", "block"])
    p.add_argument("--block-size", type=int)
    p.add_argument("--layers", choices=sorted(_LAYER_FLAGS))
    p.add_argument("--lora", action="store_true", help="fuse LoRA A/B factors pairwise")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("baseline", parents=[common], help="merge with a reference method")
    p.add_argument("paths", nargs="+", metavar="[METHOD] INIT EXPERT", help="optional method name, init checkpoint, experts")
    p.add_argument("--method", choices=BASELINE_METHODS)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("analyze", parents=[common], help="compatibility score of an activation trace")
    p.add_argument("trace")
    p.add_argument("--enforce", action="store_true", help="exit 1 unless the verdict is Fusable")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", parents=[common], help="run the synthetic-expert comparison")
    p.add_argument("bench_config", nargs="?", help="harness config JSON (defaults built in)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="dump a checkpoint header")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("diff", help="per-tensor max absolute difference")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_diff)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfigError as exc:
        print(f"graft: config error: {exc}", file=sys.stderr)
        return 2
    except (GraftError, OSError) as exc:
        print(f"graft: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
