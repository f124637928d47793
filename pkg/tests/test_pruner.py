import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import chain, conv
from poseopt import zoo
from poseopt.cost_model import DEFAULT_LATENCY_PARAMS, LatencyParams, graph_latency
from poseopt.errors import InvalidRatio, ShapeIncompatibleWithBlock, TargetUnreachable, UnknownNodeInPlan
from poseopt.executor import WeightStore, init_weights
from poseopt.pruner import (Decision, PrunePlan, Scheme, SensitivityPolicy, admissible_ratios,
                            apply_plan, check_plan, load_policy, magnitude_mask, plan,
                            sensitivity_scan, unit_scores, units_pruned)

EX = LatencyParams(time_per_mac=1.0, per_node_overhead=5.0, sparse_inefficiency=2.0, sparse_overhead=10.0)


def single_conv(tag="Backbone"):
    # 1x1 conv on a 10x10 single-channel map: 100 MACs
    return chain(conv("c", "x", 1, 1, 1, bias=False, tag=tag), shape=(1, 10, 10))


def test_unstructured_example():
    m = magnitude_mask(np.array([0.1, -0.5, 0.3, 0.05]), 0.5)
    assert set(np.flatnonzero(m.keep)) == {1, 2}


def test_block_example():
    w = np.array([[1, 2, 0.1, 0.1], [3, 1, 0.2, 0.1]])
    s = Scheme("block", 1, 2)
    assert np.allclose(unit_scores(w, s), [3, 0.2, 4, 0.3])
    m = magnitude_mask(w, 0.5, s)
    assert m.keep.tolist() == [[True, True, False, False], [True, True, False, False]]


def test_channel_mask_zeroes_whole_channels():
    w = np.arange(2 * 3 * 3 * 3, dtype=np.float32).reshape(2, 3, 3, 3) - 20
    m = magnitude_mask(w, 0.5, "channel")
    per_channel = m.keep.reshape(2, -1)
    assert all(row.all() or not row.any() for row in per_channel)
    assert m.pruned == 27


def test_ratio_zero_keeps_everything():
    w = np.random.default_rng(0).standard_normal((4, 3, 3, 3))
    for s in ("unstructured", "channel", "block:2x3"):
        assert magnitude_mask(w, 0.0, s).keep.all()


def test_bad_inputs():
    with pytest.raises(InvalidRatio):
        magnitude_mask(np.ones(4), 1.5)
    with pytest.raises(ShapeIncompatibleWithBlock):
        magnitude_mask(np.ones((3, 5)), 0.5, "block:2x2")
    with pytest.raises(ValueError):
        Scheme.parse("random")


@pytest.mark.parametrize("text", ["unstructured", "channel", "block:4x1", "block(2,8)"])
def test_scheme_round_trip(text):
    s = Scheme.parse(text)
    assert Scheme.parse(str(s)) == s


def test_units_pruned():
    assert units_pruned(10, 0.3) == 3
    assert units_pruned(7, 0.5) == 3
    assert units_pruned(5, 1.0) == 5


schemes = st.sampled_from([Scheme("unstructured"), Scheme("channel"), Scheme("block", 2, 3)])


@given(arrays(np.float32, (4, 2, 3, 3), elements=st.floats(-4, 4, width=32)), schemes,
       st.floats(0, 1), st.floats(0, 1))
def test_nested_masks(w, scheme, r1, r2):
    lo, hi = sorted((r1, r2))
    a, b = magnitude_mask(w, lo, scheme), magnitude_mask(w, hi, scheme)
    assert not (b.keep & ~a.keep).any()


@given(arrays(np.float32, (6, 4), elements=st.floats(-4, 4, width=32)), schemes, st.floats(0, 1))
def test_exact_count(w, scheme, r):
    s = scheme if scheme.kind != "block" else Scheme("block", 2, 2)
    m = magnitude_mask(w, r, s)
    unit = {"unstructured": 1, "channel": 4, "block": 4}[s.kind]
    n_units = w.size // unit
    assert m.pruned == units_pruned(n_units, r) * unit


def test_admissible_and_plan_example():
    g = single_conv()
    node = g.node("c")
    assert admissible_ratios(node, EX, 100, SensitivityPolicy()) == [0.6, 0.7, 0.8, 0.9]
    p = plan(g, EX, target_speedup=1.5)
    assert p.ratios() == {"c": 0.8}
    assert p.predicted_dense_latency == 105 and p.predicted_planned_latency == pytest.approx(55)
    assert p.predicted_speedup == pytest.approx(105 / 55)


def test_plan_with_target_already_met_is_empty():
    p = plan(single_conv(), EX, target_speedup=1.0)
    assert p.decisions == ()


def test_cap_zero_blocks_branch():
    g = zoo.lightweight_openpose()
    policy = SensitivityPolicy({"PafBranch": 0.0})
    p = plan(g, DEFAULT_LATENCY_PARAMS, policy, target_speedup=1.2)
    assert all(g.node(d.node_id).block_tag != "PafBranch" for d in p.decisions)


def test_unreachable_target():
    with pytest.raises(TargetUnreachable) as info:
        plan(single_conv(), EX, target_speedup=100)
    assert info.value.best_achievable_speedup == pytest.approx(105 / 35)
    assert info.value.exit_code == 3


@pytest.mark.parametrize("builder, target", [(zoo.lightweight_openpose, 1.3), (zoo.openpose_vgg, 1.5)])
def test_plans_are_legal_and_consistent(builder, target):
    g = builder()
    p = plan(g, DEFAULT_LATENCY_PARAMS, target_speedup=target)
    assert check_plan(g, p, DEFAULT_LATENCY_PARAMS) == []
    assert graph_latency(g, p, DEFAULT_LATENCY_PARAMS).total == p.predicted_planned_latency
    assert p.predicted_speedup >= target
    again = plan(g, DEFAULT_LATENCY_PARAMS, target_speedup=target)
    assert json.dumps(again.to_json()) == json.dumps(p.to_json())


def test_plan_json_round_trip():
    p = plan(zoo.lightweight_openpose(), DEFAULT_LATENCY_PARAMS, target_speedup=1.3)
    q = PrunePlan.from_json(json.loads(json.dumps(p.to_json())))
    assert q == p


def test_policy_validation(tmp_path):
    with pytest.raises(ValueError):
        SensitivityPolicy({"Neck": 0.5})
    with pytest.raises(ValueError):
        SensitivityPolicy(candidate_ratios=(0.8, 0.5))
    with pytest.raises(ValueError):
        SensitivityPolicy({"Backbone": 1.5})
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"max_ratio": {"PafBranch": 0.2}}))
    assert load_policy(path).cap("PafBranch") == 0.2


def toy_store():
    g = zoo.toy_pose_net(16, 16)
    return g, init_weights(g, seed=3)


def test_apply_empty_plan_is_identity():
    g, w = toy_store()
    out = apply_plan(w, g, PrunePlan((), 1.0, 1.0, SensitivityPolicy()))
    for k in w.weights:
        assert np.array_equal(out.weights[k], w.weights[k])


def test_apply_plan_zero_count_and_idempotence():
    g, w = toy_store()
    p = PrunePlan((Decision("bb1", Scheme("unstructured"), 0.5),), 1.0, 1.0, SensitivityPolicy())
    once = apply_plan(w, g, p)
    n = w.weights["bb1"].size
    zeros_added = np.count_nonzero(once.weights["bb1"] == 0) - np.count_nonzero(w.weights["bb1"] == 0)
    assert zeros_added == n // 2
    twice = apply_plan(once, g, p)
    assert np.array_equal(twice.weights["bb1"], once.weights["bb1"])
    assert np.array_equal(once.biases["bb1"], w.biases["bb1"])


def test_apply_plan_unknown_node():
    g, w = toy_store()
    p = PrunePlan((Decision("nope", Scheme("unstructured"), 0.5),), 1.0, 1.0, SensitivityPolicy())
    with pytest.raises(UnknownNodeInPlan):
        apply_plan(w, g, p)


def test_sensitivity_ratio_zero_and_full():
    g = chain(conv("c", "x", 2, 3, 3, bias=False), shape=(2, 8, 8))
    w = init_weights(g, seed=1)
    curve = sensitivity_scan(g, w, "Backbone", [0.0, 0.5, 1.0], probes=3, seed=0)
    assert curve[0]["distortion"] == 0.0
    assert curve[2]["distortion"] == 1.0
    assert 0 < curve[1]["distortion"] < 1


def test_sensitivity_curves_monotone_and_deterministic():
    g, w = toy_store()
    ratios = [0.1, 0.3, 0.5, 0.7, 0.9]
    for tag in ("Backbone", "PafBranch"):
        a = sensitivity_scan(g, w, tag, ratios, probes=2, seed=5)
        b = sensitivity_scan(g, w, tag, ratios, probes=2, seed=5)
        assert a == b
        d = [x["distortion"] for x in a]
        assert d[-1] > d[0]


def test_distortion_budget_plan():
    g, w = toy_store()
    lp = LatencyParams(1e-9, 1e-6, 1.2, 1e-6)
    p = plan(g, lp, weights=w, max_distortion=0.3, probes=2)
    assert check_plan(g, p, lp) == []
    assert p.target == {"max_distortion": 0.3}
    with pytest.raises(ValueError):
        plan(g, lp, max_distortion=0.3)
