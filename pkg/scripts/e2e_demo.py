"""Latency budget of the full pipeline on every bundled graph.

For each graph: dense latency, latency after the rewrite passes, and the
best pruned latency the greedy planner reaches, under the default
calibration. Prints a small table.

    python3 scripts/e2e_demo.py [--calib fixtures/default_calib.json]
"""

import argparse
from pathlib import Path

from poseopt.cost_model import DEFAULT_LATENCY_PARAMS, graph_latency, load_latency_params
from poseopt.errors import TargetUnreachable
from poseopt.graph_ir import load_graph
from poseopt.pruner import plan
from poseopt.rewrite import optimize

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def best_plan(g, lp):
    lo, hi = 1.0, 8.0
    best = plan(g, lp, target_speedup=1.0)
    for _ in range(30):
        mid = (lo + hi) / 2
        try:
            best = plan(g, lp, target_speedup=mid)
            lo = mid
        except TargetUnreachable:
            hi = mid
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--calib")
    args = ap.parse_args()
    lp = load_latency_params(args.calib) if args.calib else DEFAULT_LATENCY_PARAMS
    print(f"{'graph':<14}{'dense ms':>10}{'rewritten':>11}{'pruned':>10}{'overall':>9}")
    for name in ("toy", "lwop", "openpose_vgg"):
        g = load_graph(FIXTURES / f"{name}.graph.json")
        g1, _ = optimize(g, activation_swap=("swish", "hardtanh"))
        p = best_plan(g1, lp)
        ratios = {d.node_id: d.ratio for d in p.decisions}
        t0 = graph_latency(g, None, lp).total
        t1 = graph_latency(g1, None, lp).total
        t2 = graph_latency(g1, ratios, lp).total
        print(f"{name:<14}{t0 * 1e3:>10.2f}{t1 * 1e3:>11.2f}{t2 * 1e3:>10.2f}{t0 / t2:>8.2f}x")


if __name__ == "__main__":
    main()
