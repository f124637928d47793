"""One test per acceptance criterion, each at its stated tolerance.

Every test records a single PASS/FAIL line, printed again in the pytest
terminal summary.
"""

import io
import json
import math
import time
from fractions import Fraction

import numpy as np
from conftest import FIXTURES, acceptance, chain, conv
from oracles import brute_conv2d
from poseopt import synth, zoo
from poseopt.cli import run_command
from poseopt.cost_model import (DEFAULT_LATENCY_PARAMS, LatencyParams, breakeven_ratio, graph_cost,
                                graph_latency, layer_latency, receptive_field)
from poseopt.errors import TargetUnreachable, ToleranceExceeded
from poseopt.executor import WeightStore, run
from poseopt.graph_ir import Graph, GraphInput, Stage, StageSpec, load_graph, output_shapes, validate
from poseopt.paf_decoder import COCO_SKELETON, DecodeConfig, decode
from poseopt.pruner import (SensitivityPolicy, check_plan, magnitude_mask, plan,
                            units_pruned, Scheme)
from poseopt.rewrite import dedilate, depth_rescale, optimize

CALIB = str(FIXTURES / "default_calib.json")


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run_command([str(a) for a in argv], out, err)
    return code, (json.loads(out.getvalue()) if out.getvalue() else None), err.getvalue()


def test_criterion_1_lwop_accounting():
    t0 = time.perf_counter()
    code, rep, _ = cli("analyze", FIXTURES / "lwop.graph.json", "--input", "3x368x368")
    elapsed = time.perf_counter() - t0
    totals = rep["results"]["cost"]["totals"]
    params_ok = abs(totals["params"] / 4.1e6 - 1) <= 0.15
    flops_ok = abs(totals["flops"] / 9e9 - 1) <= 0.15
    macs_ok = abs(totals["macs"] / 9e9 - 1) <= 0.15
    ok = code == 0 and params_ok and (flops_ok or macs_ok) and elapsed < 1.0
    acceptance(1, ok, f"params {totals['params'] / 1e6:.3f}M, MACs {totals['macs'] / 1e9:.3f}G, "
                      f"FLOPs {totals['flops'] / 1e9:.3f}G (MAC convention matches), {elapsed:.3f}s")
    assert ok


def test_criterion_2_rewrite_invariants(tmp_path):
    src = FIXTURES / "openpose_vgg.graph.json"
    out = tmp_path / "vgg.json"
    code, rep, _ = cli("optimize", src, "--replace-large-kernels", "-o", out)
    assert code == 0
    g, g2 = load_graph(src), load_graph(out)
    entries = [e for e in rep["results"]["rewrite_log"]["entries"] if e["status"] == "replaced"]
    cc = [e for e in entries if g.node(e["original_node_id"]).attrs["in_channels"]
          == g.node(e["original_node_id"]).attrs["out_channels"]]
    ratios_ok = all(Fraction(e["macs_after"], e["macs_before"]) == Fraction(27, 49) for e in cc)
    global_rf_ok = all(e["rf_before"] == e["rf_after"] for e in entries)
    local_rf_ok = True
    for e in cc:
        node = g.node(e["original_node_id"])
        shape = (node.attrs["in_channels"], 46, 46)
        single = Graph("one", (GraphInput(node.inputs[0], shape),), (node,), (node.id,))
        members = tuple(g2.node(i) for i in e["replacement_node_ids"])
        rebuilt = Graph("chain", (GraphInput(node.inputs[0], shape),), members, (members[-1].id,))
        before = receptive_field(single, node.id)
        after = receptive_field(rebuilt, members[-1].id)
        local_rf_ok &= before.size == after.size == 7
    valid = validate(g2) == [] and output_shapes(g2) == output_shapes(g)
    d = chain(conv("d", "x", 8, 8, 3, dilation=3), shape=(8, 20, 20))
    d2, log = dedilate(d)
    dil_ok = (receptive_field(d, "d").size == 7
              and receptive_field(d2, log.entries[0].replacement_node_ids[-1]).size == 7)
    ok = bool(cc) and ratios_ok and global_rf_ok and local_rf_ok and valid and dil_ok
    acceptance(2, ok, f"{len(cc)} C->C 7x7 layers at MAC ratio 27/49 with rf 7->7 "
                      f"({len(entries)} replaced in total); valid graph, outputs unchanged; "
                      f"dedilated 3x3 d=3 keeps rf 7")
    assert ok


def decode_oracle():
    clean_ok = 0
    worst = 0.0
    noisy_ok = 0
    strict_noisy_ok = 0
    timed = 0.0
    smoothed = DecodeConfig(heatmap_smoothing_sigma=2.0)
    for seed in range(200):
        k = 1 + seed % 6
        t0 = time.perf_counter()
        truth = synth.gen_poses(k, COCO_SKELETON, synth.RenderConfig(), seed)
        heat, paf = synth.render(truth, COCO_SKELETON, synth.RenderConfig())
        m = synth.match_to_ground_truth(decode(heat, paf), truth, 1.5)
        clean_ok += m["exact"]
        if m["max_error_px"] is not None:
            worst = max(worst, m["max_error_px"])
        noisy_cfg = synth.RenderConfig(noise_amplitude=0.05, noise_seed=seed)
        nheat, npaf = synth.render(truth, COCO_SKELETON, noisy_cfg)
        noisy_ok += len(decode(nheat, npaf, cfg=smoothed)) == k
        timed += time.perf_counter() - t0
        # informational: the same noisy maps with no pre-smoothing (not timed)
        strict_noisy_ok += len(decode(nheat, npaf)) == k
    return clean_ok, worst, noisy_ok, strict_noisy_ok, timed


def test_criterion_3_decoder_oracle():
    clean_ok, worst, noisy_ok, strict_ok, elapsed = decode_oracle()
    ok = clean_ok == 200 and noisy_ok >= 190 and elapsed < 60
    acceptance(3, ok, f"clean exact {clean_ok}/200 (worst joint error {worst:.3f}px); noise 0.05 count "
                      f"{noisy_ok}/200 with sigma-2 heatmap pre-smoothing ({strict_ok}/200 without); "
                      f"{elapsed:.1f}s")
    assert ok


def random_params(rng):
    so = 0.0 if rng.random() < 0.15 else 10 ** rng.uniform(-7, -2)
    e = 1.0 if rng.random() < 0.15 else rng.uniform(1, 4)
    return LatencyParams(10 ** rng.uniform(-13, -9), 10 ** rng.uniform(-7, -3), e, so)


def test_criterion_4_breakeven_law():
    rng = np.random.default_rng(2024)
    grid = [i / 100 for i in range(1, 101)]
    mismatches = 0
    ties = 0
    unprofitable = 0
    for _ in range(1000):
        lp = random_params(rng)
        macs = int(10 ** rng.uniform(2, 10))
        p_star = breakeven_ratio(None, lp, macs)
        unprofitable += p_star is None
        dense = layer_latency(None, 0.0, lp, macs)
        for p in grid:
            if p_star is not None and abs(p - p_star) < 1e-9:
                ties += 1  # T(p) == T(0) analytically here; float rounding decides
                continue
            faster = layer_latency(None, p, lp, macs) < dense
            mismatches += faster != (p_star is not None and p > p_star)

    illegal = 0
    plans = 0
    prng = np.random.default_rng(7)
    graphs = [zoo.lightweight_openpose(), zoo.openpose_vgg(), zoo.toy_pose_net()]
    graphs += [optimize(g, activation_swap=("swish", "hardtanh"))[0] for g in graphs]
    for g in graphs:
        for _ in range(4):
            caps = {t: float(prng.choice([0.0, 0.4, 0.6, 0.8, 1.0])) for t in
                    ("Backbone", "InitialStage", "HeatmapBranch", "PafBranch", "Other")}
            lp = DEFAULT_LATENCY_PARAMS if prng.random() < 0.5 else random_params(prng)
            policy = SensitivityPolicy(caps)
            try:
                p = plan(g, lp, policy, target_speedup=float(prng.uniform(1.0, 1.6)))
            except TargetUnreachable:
                continue
            plans += 1
            illegal += len(check_plan(g, p, lp))
            cost = graph_cost(g)
            for d in p.decisions:
                node = g.node(d.node_id)
                p_star = breakeven_ratio(node, lp, cost.per_node[d.node_id].macs)
                illegal += not (p_star is not None and d.ratio > p_star and d.ratio <= caps[node.block_tag])
    ok = mismatches == 0 and illegal == 0 and plans > 0
    acceptance(4, ok, f"1000 draws x 100 ratios: {mismatches} violations ({ties} float ties at p*, "
                      f"{unprofitable} unprofitable layers); {plans} plans, {illegal} illegal ratios")
    assert ok


def random_tensor(rng):
    o, i, k = int(rng.integers(1, 17)), int(rng.integers(1, 9)), int(rng.choice([1, 3]))
    w = rng.standard_normal((o, i, k, k)).astype(np.float32)
    if rng.random() < 0.2:
        w = np.round(w, 1)  # plenty of exact ties
    cols = i * k * k
    br = int(rng.choice([d for d in range(1, o + 1) if o % d == 0]))
    bc = int(rng.choice([d for d in range(1, cols + 1) if cols % d == 0]))
    return w, br, bc


def test_criterion_5_mask_laws():
    rng = np.random.default_rng(5)
    ratios = [r / 10 for r in range(1, 10)]
    count_err = nest_err = det_err = 0
    for _ in range(500):
        w, br, bc = random_tensor(rng)
        for scheme in (Scheme("unstructured"), Scheme("channel"), Scheme("block", br, bc)):
            unit = {"unstructured": 1, "channel": w[0].size, "block": br * bc}[scheme.kind]
            prev = None
            for r in ratios:
                m = magnitude_mask(w, r, scheme)
                count_err += m.pruned != units_pruned(w.size // unit, r) * unit
                if prev is not None:
                    nest_err += bool((m.keep & ~prev).any())
                det_err += magnitude_mask(w.copy(), r, scheme).keep.tobytes() != m.keep.tobytes()
                prev = m.keep
    ok = count_err == nest_err == det_err == 0
    acceptance(5, ok, f"500 tensors x 9 ratios x 3 schemes: {count_err} count, {nest_err} nesting, "
                      f"{det_err} determinism failures")
    assert ok


def test_criterion_6_executor_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        k = int(rng.choice([1, 3, 5, 7]))
        stride, dil = int(rng.choice([1, 2])), int(rng.choice([1, 2, 3]))
        groups = int(rng.choice([1, 2]))
        cin = groups * int(rng.integers(1, 8 // groups + 1))
        cout = groups * int(rng.integers(1, 8 // groups + 1))
        k_eff = dil * (k - 1) + 1
        pad = int(rng.integers(max(0, (k_eff - 15) // 2), k_eff // 2 + 1))
        h = int(rng.integers(max(1, k_eff - 2 * pad), 17))
        wd = int(rng.integers(max(1, k_eff - 2 * pad), 17))
        bias = bool(rng.random() < 0.5)
        node = conv("c", "x", cin, cout, k, stride, dil, groups, bias, pad)
        g = chain(node, shape=(cin, h, wd))
        wt = rng.standard_normal((cout, cin // groups, k, k)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32) if bias else None
        store = WeightStore({"c": wt}, {"c": b} if bias else {})
        x = rng.standard_normal((cin, h, wd)).astype(np.float32)
        got = run(g, store, {"x": x})["c"]
        ref = np.array(brute_conv2d(x, wt, b, stride, pad, dil, groups))
        assert got.shape == ref.shape
        worst = max(worst, float(np.abs(got - ref).max()))
    ok = worst < 1e-5
    acceptance(6, ok, f"200 random convs vs six-loop direct convolution, max abs diff {worst:.2e}")
    assert ok


def test_criterion_7_speedup_estimate(tmp_path):
    lines = []
    ok = True
    targets = {"lwop": [1.3], "openpose_vgg": [1.3, 2.0], "toy": [1.0]}
    for name, ts in targets.items():
        g = load_graph(FIXTURES / f"{name}.graph.json")
        base = graph_latency(g, None, DEFAULT_LATENCY_PARAMS).total
        for t in ts:
            out = tmp_path / f"{name}_{t}"
            code, rep, err = cli("e2e", "--graph", FIXTURES / f"{name}.graph.json", "--calib", CALIB,
                                 "--target-speedup", t, "--persons", 2, "--seed", 3, "--size", "200x200",
                                 "-o", out)
            assert code == 0, err
            lat = rep["results"]["latency"]
            g1 = load_graph(out / "rewritten.graph.json")
            plan_doc = json.loads((out / "plan.json").read_text())
            ratios = {d["node"]: d["ratio"] for d in plan_doc["decisions"]}
            dense = graph_latency(g1, None, DEFAULT_LATENCY_PARAMS).total
            planned = graph_latency(g1, ratios, DEFAULT_LATENCY_PARAMS).total
            consistent = (lat["dense_total"] == dense and lat["planned_total"] == planned
                          and lat["predicted_speedup"] == dense / planned
                          and lat["original_dense_total"] == base)
            lower = planned < base
            ok &= consistent and lower
            lines.append(f"{name}@{t}: {base * 1e3:.2f}->{planned * 1e3:.2f}ms "
                         f"(x{base / planned:.2f}, plan x{dense / planned:.3f})")
    acceptance(7, ok, "rewritten+pruned latency below unoptimized and e2e speedup matches "
                      "recomputation: " + "; ".join(lines))
    assert ok


def stage_body_oracle(spec, hw=(64, 64)):
    h, w = hw
    total = 0
    for s in spec.stages:
        h, w = (h - 1) // s.stride_first + 1, (w - 1) // s.stride_first + 1
        if s.block_kind == "plain3x3":
            per = 9 * s.width ** 2
        else:
            mid = max(1, s.width // 4)
            per = 2 * s.width * mid + 9 * mid ** 2
        total += s.num_blocks * per * h * w
    return total


def test_criterion_8_depth_rescale():
    rng = np.random.default_rng(8)
    ok = True
    attempts = successes = tolerance_fail = 0
    for _ in range(100):
        spec = StageSpec(tuple(Stage(int(rng.integers(1, 7)), int(rng.integers(1, 33)) * 8,
                                     str(rng.choice(["plain3x3", "bottleneck"])), int(rng.choice([1, 2])))
                               for _ in range(int(rng.integers(1, 5)))))
        for m in (0.5, 1, 2, 3):
            attempts += 1
            try:
                new = depth_rescale(spec, m)
            except ToleranceExceeded as exc:
                tolerance_fail += 1
                ok &= abs(exc.achieved_ratio - 1) > 0.15
                continue
            successes += 1
            ratio = stage_body_oracle(new) / stage_body_oracle(spec)
            ok &= abs(ratio - 1) <= 0.15
            for a, b in zip(spec.stages, new.stages):
                ok &= b.num_blocks == math.floor(Fraction(str(m)) * a.num_blocks + Fraction(1, 2))
            if m == 1:
                ok &= new is spec
    acceptance(8, ok, f"{successes}/{attempts} rescalings succeeded within tolerance, "
                      f"{tolerance_fail} rejected with ToleranceExceeded; m=1 identity")
    assert ok
