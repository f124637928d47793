"""Parameter/FLOPs accounting, receptive fields and the latency model.

Counting convention: one MAC is two FLOPs and every bias add costs one
FLOP per output element. Only Conv2d nodes do arithmetic work; the other
operators contribute per-node overhead in the latency model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping

from .errors import InvalidRatio, UnknownNodeInPlan, UnreachableNode
from .graph_ir import Graph, OpNode, TensorShape, infer_shapes, topological_order


@dataclass(frozen=True)
class NodeCost:
    params: int = 0
    macs: int = 0
    flops: int = 0


@dataclass(frozen=True)
class CostReport:
    per_node: dict[str, NodeCost]
    input_shapes: dict[str, TensorShape]

    @property
    def params(self) -> int:
        return sum(c.params for c in self.per_node.values())

    @property
    def macs(self) -> int:
        return sum(c.macs for c in self.per_node.values())

    @property
    def flops(self) -> int:
        return sum(c.flops for c in self.per_node.values())

    def to_json(self) -> dict:
        return {
            "input_shapes": {k: list(v) for k, v in self.input_shapes.items()},
            "totals": {"params": self.params, "macs": self.macs, "flops": self.flops},
            "per_node": {k: asdict(v) for k, v in self.per_node.items()},
        }


def conv_cost(node: OpNode, out_shape: TensorShape) -> NodeCost:
    a = node.attrs
    _, h, w = out_shape
    weights = a["kernel_h"] * a["kernel_w"] * (a["in_channels"] // a["groups"]) * a["out_channels"]
    bias = a["out_channels"] if a["has_bias"] else 0
    macs = weights * h * w
    bias_adds = a["out_channels"] * h * w if a["has_bias"] else 0
    return NodeCost(params=weights + bias, macs=macs, flops=2 * macs + bias_adds)


def node_cost(node: OpNode, out_shape: TensorShape) -> NodeCost:
    if node.is_conv:
        return conv_cost(node, out_shape)
    if node.op == "Activation" and node.attrs["fn"] == "prelu":
        return NodeCost(params=out_shape[0])
    return NodeCost()


def graph_cost(g: Graph) -> CostReport:
    shapes = infer_shapes(g)
    per_node = {n.id: node_cost(n, shapes[n.id]) for n in g.nodes}
    return CostReport(per_node, dict(g.input_shapes))


# ---------------------------------------------------------------------------
# receptive field


@dataclass(frozen=True)
class ReceptiveField:
    size: Fraction
    jump: Fraction

    def to_json(self) -> dict:
        return {"size": _num(self.size), "jump": _num(self.jump)}


def _num(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


def effective_kernel(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) + 1


def receptive_fields(g: Graph) -> dict[str, ReceptiveField]:
    """Receptive field at every node output, maximised over incoming paths.

    Only the height axis is tracked for non-square kernels; graph inputs
    start at size 1, jump 1.
    """
    one = Fraction(1)
    rf = {name: ReceptiveField(one, one) for name in g.input_shapes}
    for nid in topological_order(g):
        node = g.node(nid)
        ins = [rf[s] for s in node.inputs if s in rf]
        if not ins:
            continue
        size = max(r.size for r in ins)
        jump = max(r.jump for r in ins)
        a = node.attrs
        if node.is_conv:
            k = max(effective_kernel(a["kernel_h"], a["dilation"]),
                    effective_kernel(a["kernel_w"], a["dilation"]))
            size, jump = size + (k - 1) * jump, jump * a["stride"]
        elif node.op == "MaxPool":
            size, jump = size + (a["kernel"] - 1) * jump, jump * a["stride"]
        elif node.op == "Upsample":
            jump = jump / a["scale"]
        rf[nid] = ReceptiveField(size, jump)
    return rf


def receptive_field(g: Graph, node_id: str) -> ReceptiveField:
    fields = receptive_fields(g)
    if node_id not in fields:
        raise UnreachableNode(f"node {node_id!r} is not reachable from any input", node_id)
    return fields[node_id]


# ---------------------------------------------------------------------------
# latency model


@dataclass(frozen=True)
class LatencyParams:
    """Calibration constants, all in seconds except ``sparse_inefficiency``.

    ``unfriendly_op_penalty`` keys are activation names (``swish``), op kinds
    (``Upsample``) or the conv classes ``dilated_conv`` / ``large_kernel_conv``.
    """

    time_per_mac: float
    per_node_overhead: float
    sparse_inefficiency: float = 1.0
    sparse_overhead: float = 0.0
    unfriendly_op_penalty: Mapping[str, float] = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "unfriendly_op_penalty", dict(self.unfriendly_op_penalty))
        for name in ("time_per_mac", "per_node_overhead", "sparse_overhead"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.sparse_inefficiency < 1:
            raise ValueError("sparse_inefficiency must be >= 1")
        if any(v < 0 for v in self.unfriendly_op_penalty.values()):
            raise ValueError("penalties must be nonnegative")

    def to_json(self) -> dict:
        out = asdict(self)
        out["unfriendly_op_penalty"] = dict(self.unfriendly_op_penalty)
        return out

    @classmethod
    def from_json(cls, doc: Mapping) -> "LatencyParams":
        known = {"time_per_mac", "per_node_overhead", "sparse_inefficiency", "sparse_overhead",
                 "unfriendly_op_penalty", "note"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown calibration field(s) {sorted(extra)}")
        return cls(**doc)


def load_latency_params(path) -> LatencyParams:
    with open(path, encoding="utf-8") as fh:
        return LatencyParams.from_json(json.load(fh))


# Illustrative, non-physical constants: roughly a 100 GMAC/s device with a
# 20 us dispatch cost per operator. Calibrate against real measurements.
DEFAULT_LATENCY_PARAMS = LatencyParams(
    time_per_mac=1e-11,
    per_node_overhead=2e-5,
    sparse_inefficiency=1.6,
    sparse_overhead=4e-5,
    unfriendly_op_penalty={"swish": 3e-4, "sigmoid": 1.5e-4, "dilated_conv": 4e-3,
                           "large_kernel_conv": 1e-3},
    note="illustrative non-physical defaults; calibrate with your own measurements",
)


def penalty_keys(node: OpNode) -> list[str]:
    if node.op == "Activation":
        return [node.attrs["fn"]]
    keys = [node.op]
    if node.is_conv:
        if node.attrs["dilation"] > 1:
            keys.append("dilated_conv")
        if max(node.attrs["kernel_h"], node.attrs["kernel_w"]) > 3:
            keys.append("large_kernel_conv")
    return keys


def op_penalty(node: OpNode, lp: LatencyParams) -> float:
    return sum(lp.unfriendly_op_penalty.get(k, 0.0) for k in penalty_keys(node))


def layer_latency(node: OpNode | None, prune_ratio: float, lp: LatencyParams, macs: int) -> float:
    """Predicted seconds for one node executed densely (ratio 0) or sparsely."""
    if not 0.0 <= prune_ratio <= 1.0:
        raise InvalidRatio(f"prune ratio {prune_ratio!r} outside [0, 1]")
    fixed = lp.per_node_overhead + (op_penalty(node, lp) if node is not None else 0.0)
    work = macs * lp.time_per_mac
    if prune_ratio == 0:
        return work + fixed
    return work * (1 - prune_ratio) * lp.sparse_inefficiency + fixed + lp.sparse_overhead


def breakeven_ratio(node: OpNode | None, lp: LatencyParams, macs: int) -> float | None:
    """Smallest ratio at which sparse execution ties dense execution.

    Returns None when even removing every weight cannot beat the dense
    kernel (the sparse overhead exceeds the dense work).
    """
    work = macs * lp.time_per_mac
    if work <= 0:
        return None
    p = 1 - (work - lp.sparse_overhead) / (work * lp.sparse_inefficiency)
    if p >= 1:
        return None
    return max(p, 0.0)


@dataclass(frozen=True)
class LatencyBreakdown:
    total: float
    per_node: dict[str, float]

    def to_json(self) -> dict:
        return {"total": self.total, "per_node": dict(self.per_node)}


def graph_latency(g: Graph, plan=None, lp: LatencyParams = DEFAULT_LATENCY_PARAMS,
                  cost: CostReport | None = None) -> LatencyBreakdown:
    """Sum of ``layer_latency`` over nodes in declaration order.

    ``plan`` is a PrunePlan (or any object with ``ratios()``) or a plain
    ``{node_id: ratio}`` mapping; absent nodes run dense.
    """
    ratios: Mapping[str, float] = {}
    if plan is not None:
        ratios = plan.ratios() if hasattr(plan, "ratios") else dict(plan)
    unknown = [nid for nid in ratios if nid not in g.index]
    if unknown:
        raise UnknownNodeInPlan(f"plan references unknown node {unknown[0]!r}")
    cost = cost or graph_cost(g)
    per_node = {}
    total = 0.0
    for n in g.nodes:
        t = layer_latency(n, ratios.get(n.id, 0.0), lp, cost.per_node[n.id].macs)
        per_node[n.id] = t
        total += t
    return LatencyBreakdown(total, per_node)


def fit_latency_params(dense: list[tuple[float, float]], sparse: list[tuple[float, float, float]] = (),
                       penalties: Mapping[str, float] | None = None) -> LatencyParams:
    """Least-squares calibration from measured layer timings.

    ``dense`` holds ``(macs, seconds)``; ``sparse`` holds ``(macs, ratio,
    seconds)`` for pruned layers. Fitted values are clipped to their legal
    ranges.
    """
    import numpy as np

    if len(dense) < 2:
        raise ValueError("need at least two dense measurements")
    a = np.array([[m, 1.0] for m, _ in dense])
    t = np.array([s for _, s in dense])
    (tpm, overhead), *_ = np.linalg.lstsq(a, t, rcond=None)
    tpm, overhead = max(float(tpm), 0.0), max(float(overhead), 0.0)
    ineff, sp_over = 1.0, 0.0
    if len(sparse) >= 2:
        b = np.array([[m * (1 - r) * tpm, 1.0] for m, r, _ in sparse])
        ts = np.array([s - overhead for _, _, s in sparse])
        (ineff, sp_over), *_ = np.linalg.lstsq(b, ts, rcond=None)
        ineff, sp_over = max(float(ineff), 1.0), max(float(sp_over), 0.0)
    return LatencyParams(tpm, overhead, ineff, sp_over, dict(penalties or {}),
                         note="fitted from measurements")
