"""Held-out losses of the fused model as the block size grows, against per-channel fusion."""

import argparse

from graft.core import GateConfig, fuse_checkpoints
from graft.harness import ExpertSpec, SyntheticTask, evaluate, train_expert


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    parser.add_argument("--hidden", type=int, default=32)
    args = parser.parse_args()

    spec_a = ExpertSpec(task=SyntheticTask("binary-a", 3), hidden=(args.hidden,), steps=400)
    spec_b = ExpertSpec(task=SyntheticTask("binary-b", 4), hidden=(args.hidden,), steps=400)
    a, b = train_expert(spec_a), train_expert(spec_b)

    rows = [("channel", GateConfig())]
    rows += [(f"block {k}", GateConfig(granularity="block", block_size=k)) for k in args.sizes]
    print(f"{'granularity':<12}{'binary-a':>10}{'binary-b':>10}")
    for label, cfg in rows:
        fused = fuse_checkpoints(a, b, cfg)
        print(f"{label:<12}{evaluate(fused, spec_a.task):>10.4f}{evaluate(fused, spec_b.task):>10.4f}")


if __name__ == "__main__":
    main()
