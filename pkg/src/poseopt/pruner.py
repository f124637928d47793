"""Magnitude masks, block-sensitivity scans and latency-driven prune plans.

Each layer is either left dense or pruned at a ratio strictly above its
latency break-even point and no higher than the cap of its functional block.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import executor
from .cost_model import (CostReport, LatencyParams, breakeven_ratio, graph_cost, graph_latency,
                         layer_latency)
from .errors import (InvalidRatio, ShapeIncompatibleWithBlock, ShapeMismatch, TargetUnreachable,
                     UnknownNodeInPlan)
from .graph_ir import BLOCK_TAGS, Graph

_EPS = 1e-9


# ---------------------------------------------------------------------------
# schemes and masks


@dataclass(frozen=True)
class Scheme:
    kind: str  # unstructured | block | channel
    b_rows: int = 1
    b_cols: int = 1

    def __post_init__(self):
        if self.kind not in ("unstructured", "block", "channel"):
            raise ValueError(f"unknown pruning scheme {self.kind!r}")
        if self.b_rows < 1 or self.b_cols < 1:
            raise ValueError("block dims must be >= 1")

    def __str__(self) -> str:
        if self.kind == "block":
            return f"block:{self.b_rows}x{self.b_cols}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        m = re.fullmatch(r"block[:(](\d+)[x,](\d+)\)?", text.strip())
        if m:
            return cls("block", int(m.group(1)), int(m.group(2)))
        return cls(text.strip())


UNSTRUCTURED = Scheme("unstructured")


@dataclass(frozen=True)
class PruneMask:
    node_id: str
    scheme: Scheme
    keep: np.ndarray  # bool, congruent to the weight tensor

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.keep.mean()) if self.keep.size else 0.0

    @property
    def pruned(self) -> int:
        return int(self.keep.size - np.count_nonzero(self.keep))


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise InvalidRatio(f"prune ratio {ratio!r} outside [0, 1]")


def units_pruned(n_units: int, ratio: float) -> int:
    """Number of units removed: ``n - ceil((1 - ratio) * n)``."""
    _check_ratio(ratio)
    return min(n_units, math.floor(ratio * n_units + _EPS))


def _as_matrix(weights: np.ndarray) -> np.ndarray:
    if weights.ndim == 0:
        return weights.reshape(1, 1)
    if weights.ndim == 1:
        return weights.reshape(1, -1)
    return weights.reshape(weights.shape[0], -1)


def _rank(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep lower index first."""
    return np.argsort(-scores, kind="stable")


def unit_scores(weights: np.ndarray, scheme: Scheme) -> np.ndarray:
    """Per-unit importance: |w| per element, or L1 norm per block / out-channel."""
    w = np.abs(np.asarray(weights, dtype=np.float64))
    if scheme.kind == "unstructured":
        return w.reshape(-1)
    if scheme.kind == "channel":
        if w.ndim <= 1:
            return w.reshape(-1)
        return w.reshape(w.shape[0], -1).sum(axis=1)
    mat = _as_matrix(w)
    rows, cols = mat.shape
    if rows % scheme.b_rows or cols % scheme.b_cols:
        raise ShapeIncompatibleWithBlock(
            f"matrix {rows}x{cols} not tileable by {scheme.b_rows}x{scheme.b_cols} blocks")
    tiles = mat.reshape(rows // scheme.b_rows, scheme.b_rows, cols // scheme.b_cols, scheme.b_cols)
    return tiles.sum(axis=(1, 3)).reshape(-1)


def _expand(keep_units: np.ndarray, weights: np.ndarray, scheme: Scheme) -> np.ndarray:
    shape = np.shape(weights)
    if scheme.kind == "unstructured":
        return keep_units.reshape(shape)
    if scheme.kind == "channel":
        if len(shape) <= 1:
            return keep_units.reshape(shape)
        per = int(np.prod(shape[1:]))
        return np.repeat(keep_units, per).reshape(shape)
    rows, cols = _as_matrix(np.empty(shape)).shape
    grid = keep_units.reshape(rows // scheme.b_rows, cols // scheme.b_cols)
    full = np.repeat(np.repeat(grid, scheme.b_rows, axis=0), scheme.b_cols, axis=1)
    return full.reshape(shape)


def magnitude_mask(weights: np.ndarray, ratio: float, scheme: Scheme | str = UNSTRUCTURED,
                   node_id: str = "") -> PruneMask:
    """Keep the ``ceil((1 - ratio) * n)`` highest-magnitude units."""
    if isinstance(scheme, str):
        scheme = Scheme.parse(scheme)
    _check_ratio(ratio)
    scores = unit_scores(weights, scheme)
    n = scores.size
    drop = units_pruned(n, ratio)
    keep_units = np.zeros(n, dtype=bool)
    keep_units[_rank(scores)[:n - drop]] = True
    return PruneMask(node_id, scheme, _expand(keep_units, weights, scheme))


# ---------------------------------------------------------------------------
# policy and plans


DEFAULT_CAPS = {"Backbone": 0.9, "InitialStage": 0.7, "HeatmapBranch": 0.7, "PafBranch": 0.4,
                "Other": 0.5}
DEFAULT_CANDIDATES = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class SensitivityPolicy:
    max_ratio: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_CAPS))
    candidate_ratios: tuple[float, ...] = DEFAULT_CANDIDATES

    def __post_init__(self):
        caps = {**DEFAULT_CAPS, **dict(self.max_ratio)}
        unknown = set(caps) - set(BLOCK_TAGS)
        if unknown:
            raise ValueError(f"unknown block tag(s) in policy: {sorted(unknown)}")
        if any(not 0.0 <= v <= 1.0 for v in caps.values()):
            raise ValueError("policy caps must lie in [0, 1]")
        cands = tuple(float(r) for r in self.candidate_ratios)
        if not cands:
            raise ValueError("candidate_ratios must be nonempty")
        if list(cands) != sorted(set(cands)) or not all(0.0 < r <= 1.0 for r in cands):
            raise ValueError("candidate_ratios must be distinct, ascending and in (0, 1]")
        object.__setattr__(self, "max_ratio", caps)
        object.__setattr__(self, "candidate_ratios", cands)

    def cap(self, tag: str) -> float:
        return self.max_ratio[tag]

    def to_json(self) -> dict:
        return {"max_ratio": dict(self.max_ratio), "candidate_ratios": list(self.candidate_ratios)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "SensitivityPolicy":
        extra = set(doc) - {"max_ratio", "candidate_ratios"}
        if extra:
            raise ValueError(f"unknown policy field(s) {sorted(extra)}")
        return cls(doc.get("max_ratio", {}), tuple(doc.get("candidate_ratios", DEFAULT_CANDIDATES)))


def load_policy(path) -> SensitivityPolicy:
    with open(path, encoding="utf-8") as fh:
        return SensitivityPolicy.from_json(json.load(fh))


@dataclass(frozen=True)
class Decision:
    node_id: str
    scheme: Scheme
    ratio: float

    def to_json(self) -> dict:
        return {"node": self.node_id, "scheme": str(self.scheme), "ratio": self.ratio}


@dataclass(frozen=True)
class PrunePlan:
    decisions: tuple[Decision, ...]
    predicted_dense_latency: float
    predicted_planned_latency: float
    policy: SensitivityPolicy
    target: Mapping[str, float] = field(default_factory=dict)

    @property
    def predicted_speedup(self) -> float:
        return self.predicted_dense_latency / self.predicted_planned_latency

    def ratios(self) -> dict[str, float]:
        return {d.node_id: d.ratio for d in self.decisions}

    def to_json(self) -> dict:
        return {
            "decisions": [d.to_json() for d in self.decisions],
            "predicted_dense_latency": self.predicted_dense_latency,
            "predicted_planned_latency": self.predicted_planned_latency,
            "predicted_speedup": self.predicted_speedup,
            "policy": self.policy.to_json(),
            "target": dict(self.target),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "PrunePlan":
        decisions = tuple(Decision(d["node"], Scheme.parse(d.get("scheme", "unstructured")),
                                   float(d["ratio"])) for d in doc["decisions"])
        policy = SensitivityPolicy.from_json(doc["policy"]) if "policy" in doc else SensitivityPolicy()
        return cls(decisions, float(doc.get("predicted_dense_latency", 0.0)),
                   float(doc.get("predicted_planned_latency", 0.0)), policy, doc.get("target", {}))


def admissible_ratios(node, lp: LatencyParams, macs: int, policy: SensitivityPolicy) -> list[float]:
    """Candidates in ``(breakeven, cap]``, ascending; empty if unprofitable."""
    p_star = breakeven_ratio(node, lp, macs)
    if p_star is None:
        return []
    cap = policy.cap(node.block_tag)
    return [r for r in policy.candidate_ratios if p_star < r <= cap]


def _prunable_order(g: Graph, cost: CostReport, lp: LatencyParams) -> list:
    dense = {n.id: layer_latency(n, 0.0, lp, cost.per_node[n.id].macs) for n in g.convs()}
    position = {n.id: i for i, n in enumerate(g.nodes)}
    return sorted(g.convs(), key=lambda n: (-dense[n.id], position[n.id]))


def check_plan(g: Graph, plan: PrunePlan, lp: LatencyParams, cost: CostReport | None = None) -> list[str]:
    """Re-derive the legality of every decision; returns the problems found."""
    cost = cost or graph_cost(g)
    problems = []
    for d in plan.decisions:
        if d.node_id not in g.index:
            problems.append(f"{d.node_id}: unknown node")
            continue
        node = g.node(d.node_id)
        p_star = breakeven_ratio(node, lp, cost.per_node[d.node_id].macs)
        if p_star is None or not d.ratio > p_star:
            problems.append(f"{d.node_id}: ratio {d.ratio} not above break-even {p_star}")
        if d.ratio > plan.policy.cap(node.block_tag):
            problems.append(f"{d.node_id}: ratio {d.ratio} exceeds {node.block_tag} cap")
    return problems


def plan(g: Graph, lp: LatencyParams, policy: SensitivityPolicy | None = None,
         target_speedup: float | None = None, weights: executor.WeightStore | None = None,
         max_distortion: float | None = None, scheme: Scheme | str = UNSTRUCTURED,
         probes: int = 4, seed: int = 0) -> PrunePlan:
    """Greedy prune-or-not search over conv layers, slowest first.

    With ``target_speedup`` each layer takes the smallest admissible ratio
    that reaches the target; if none does it takes its largest admissible
    ratio and the search moves on. With ``max_distortion`` (weights
    required) each layer takes the largest admissible ratio that keeps the
    measured output distortion within budget.
    """
    policy = policy or SensitivityPolicy()
    if isinstance(scheme, str):
        scheme = Scheme.parse(scheme)
    if (target_speedup is None) == (max_distortion is None):
        raise ValueError("give exactly one of target_speedup or max_distortion")
    cost = graph_cost(g)
    dense = graph_latency(g, None, lp, cost).total
    ratios: dict[str, float] = {}

    def total() -> float:
        return graph_latency(g, ratios, lp, cost).total

    if target_speedup is not None:
        target = {"speedup": float(target_speedup)}
        met = dense / total() >= target_speedup
        for node in _prunable_order(g, cost, lp):
            if met:
                break
            options = admissible_ratios(node, lp, cost.per_node[node.id].macs, policy)
            if not options:
                continue
            for r in options:
                ratios[node.id] = r
                if dense / total() >= target_speedup:
                    met = True
                    break
            else:
                ratios[node.id] = options[-1]
        if not met:
            best = dense / total()
            raise TargetUnreachable(
                f"target speedup {target_speedup} unreachable; best achievable {best:.4f}", best)
    else:
        if weights is None:
            raise ValueError("a distortion budget needs weights")
        target = {"max_distortion": float(max_distortion)}
        weights.check(g)
        probe_inputs = _probes(g, probes, seed)
        reference = [executor.run(g, weights, x) for x in probe_inputs]
        for node in _prunable_order(g, cost, lp):
            options = admissible_ratios(node, lp, cost.per_node[node.id].macs, policy)
            for r in reversed(options):
                trial = {**ratios, node.id: r}
                masked = _masked_store(g, weights, trial, scheme)
                if _distortion(g, masked, probe_inputs, reference) <= max_distortion:
                    ratios[node.id] = r
                    break

    position = {n.id: i for i, n in enumerate(g.nodes)}
    decisions = tuple(Decision(nid, scheme, r) for nid, r in sorted(ratios.items(), key=lambda kv: position[kv[0]]))
    return PrunePlan(decisions, dense, total(), policy, target)


def _masked_store(g: Graph, w: executor.WeightStore, ratios: Mapping[str, float],
                  scheme: Scheme) -> executor.WeightStore:
    out = executor.WeightStore(dict(w.weights), dict(w.biases))
    for nid, r in ratios.items():
        mask = magnitude_mask(w.weights[nid], r, scheme, nid)
        out.weights[nid] = np.where(mask.keep, w.weights[nid], np.float32(0))
    return out


def apply_plan(w: executor.WeightStore, g: Graph, plan: PrunePlan) -> executor.WeightStore:
    """Zero the masked weights; everything else (biases included) is copied bit-exactly."""
    for d in plan.decisions:
        if d.node_id not in g.index or not g.node(d.node_id).is_conv:
            raise UnknownNodeInPlan(f"plan references unknown conv {d.node_id!r}")
    w.check(g)
    out = w.copy()
    for d in plan.decisions:
        mask = magnitude_mask(w.weights[d.node_id], d.ratio, d.scheme, d.node_id)
        if mask.keep.shape != w.weights[d.node_id].shape:
            raise ShapeMismatch(f"mask/weight shape mismatch at {d.node_id!r}", d.node_id)
        out.weights[d.node_id] = np.where(mask.keep, w.weights[d.node_id], np.float32(0))
    return out


def plan_masks(w: executor.WeightStore, plan: PrunePlan) -> dict[str, np.ndarray]:
    return {d.node_id: magnitude_mask(w.weights[d.node_id], d.ratio, d.scheme, d.node_id)
            .keep.astype(np.float32) for d in plan.decisions}


# ---------------------------------------------------------------------------
# sensitivity


def _probes(g: Graph, probes: int, seed: int) -> list[dict[str, np.ndarray]]:
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    return [executor.random_inputs(g, rng) for _ in range(probes)]


def relative_distortion(reference: Mapping[str, np.ndarray], masked: Mapping[str, np.ndarray]) -> float:
    ref = np.concatenate([np.asarray(reference[k], dtype=np.float64).ravel() for k in reference])
    got = np.concatenate([np.asarray(masked[k], dtype=np.float64).ravel() for k in reference])
    denom = np.linalg.norm(ref)
    if denom == 0:
        return 0.0 if np.linalg.norm(got) == 0 else math.inf
    return float(np.linalg.norm(got - ref) / denom)


def _distortion(g, store, probe_inputs, reference) -> float:
    total = 0.0
    for x, ref in zip(probe_inputs, reference):
        total += relative_distortion(ref, executor.run(g, store, x))
    return total / len(probe_inputs)


def sensitivity_scan(g: Graph, w: executor.WeightStore, tag: str, ratios: Sequence[float],
                     probes: int = 4, seed: int = 0) -> list[dict]:
    """Mean relative output distortion when every ``tag`` conv is pruned at each ratio."""
    if tag not in BLOCK_TAGS:
        raise ValueError(f"unknown block tag {tag!r}")
    w.check(g)
    targets = [n.id for n in g.convs() if n.block_tag == tag]
    probe_inputs = _probes(g, probes, seed)
    reference = [executor.run(g, w, x) for x in probe_inputs]
    curve = []
    for r in ratios:
        store = _masked_store(g, w, {nid: r for nid in targets}, UNSTRUCTURED)
        curve.append({"ratio": float(r), "distortion": _distortion(g, store, probe_inputs, reference)})
    return curve
