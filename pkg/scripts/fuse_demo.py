"""Fuse two trained toy experts, show the per-layer gates, then tune the gating net.

The tuning objective is the summed held-out loss of the fused model on both
tasks, so this also shows how far a two-parameter gate can move the result.
"""

import argparse

from graft.core import GateConfig, fuse_checkpoints, gate_summary, tune_gating_net
from graft.harness import ExpertSpec, SyntheticTask, evaluate, train_expert


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--kind-a", default="regression-sin")
    parser.add_argument("--kind-b", default="regression-cos")
    parser.add_argument("--steps", type=int, default=400)
    parser.add_argument("--budget", type=int, default=40)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    spec_a = ExpertSpec(task=SyntheticTask(args.kind_a, 1), hidden=(16, 16), steps=args.steps, seed=args.seed)
    spec_b = ExpertSpec(task=SyntheticTask(args.kind_b, 2), hidden=(16, 16), steps=args.steps, seed=args.seed)
    a, b = train_expert(spec_a), train_expert(spec_b)
    cfg = GateConfig()

    print("layer      w_global  mean_w_local")
    for name, (wg, wl) in gate_summary(a, b, cfg).items():
        print(f"{name:<10}{wg:>9.4f}{wl:>14.4f}")

    def joint_loss(model):
        return evaluate(model, spec_a.task) + evaluate(model, spec_b.task)

    fused = fuse_checkpoints(a, b, cfg)
    net = tune_gating_net(joint_loss, a, b, cfg, budget=args.budget, seed=args.seed)
    tuned = fuse_checkpoints(a, b, cfg.with_net(net))
    print()
    for label, model in (("expert a", a), ("expert b", b), ("fused", fused), ("fused+tuned", tuned)):
        la, lb = evaluate(model, spec_a.task), evaluate(model, spec_b.task)
        print(f"{label:<12} {args.kind_a}={la:.4f}  {args.kind_b}={lb:.4f}  sum={la + lb:.4f}")
    print(f"\ntuned gating net: alpha={net.alpha:.4f} beta={net.beta:.4f}")


if __name__ == "__main__":
    main()
