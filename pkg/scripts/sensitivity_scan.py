"""Per-block pruning sensitivity of a graph with random (or given) weights.

    python3 scripts/sensitivity_scan.py fixtures/toy.graph.json --weights DIR
"""

import argparse

from poseopt.executor import WeightStore, init_weights
from poseopt.graph_ir import load_graph
from poseopt.pruner import sensitivity_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("graph")
    ap.add_argument("--weights")
    ap.add_argument("--ratios", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8])
    ap.add_argument("--probes", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    g = load_graph(args.graph)
    w = WeightStore.load(args.weights) if args.weights else init_weights(g, args.seed)
    tags = sorted({n.block_tag for n in g.convs()})
    print("tag".ljust(16) + "".join(f"{r:>9.2f}" for r in args.ratios))
    for tag in tags:
        curve = sensitivity_scan(g, w, tag, args.ratios, args.probes, args.seed)
        print(tag.ljust(16) + "".join(f"{c['distortion']:>9.4f}" for c in curve))


if __name__ == "__main__":
    main()
