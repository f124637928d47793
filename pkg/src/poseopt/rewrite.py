"""Mobile-friendliness rewrite passes and FLOPs-preserving depth rescaling.

The passes are architectural: a replaced conv has no weights afterwards and
the model needs retraining. Replacement chains are purely linear (no
activations between members), use ``out_channels`` as the width of every
member and carry a bias only on the last member. Generated ids are
``{original}#1 .. {original}#n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .cost_model import ReceptiveField, effective_kernel, graph_cost, receptive_fields
from .errors import InvalidSpec, ToleranceExceeded
from .graph_ir import (ACTIVATIONS, Graph, OpNode, Stage, StageSpec, conv_attrs, conv_out_extent,
                       infer_shapes)


@dataclass(frozen=True)
class RewriteEntry:
    pass_name: str
    original_node_id: str
    replacement_node_ids: tuple[str, ...]
    rf_before: ReceptiveField | None = None
    rf_after: ReceptiveField | None = None
    macs_before: int = 0
    macs_after: int = 0
    status: str = "replaced"
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "pass_name": self.pass_name,
            "original_node_id": self.original_node_id,
            "replacement_node_ids": list(self.replacement_node_ids),
            "rf_before": self.rf_before.to_json() if self.rf_before else None,
            "rf_after": self.rf_after.to_json() if self.rf_after else None,
            "macs_before": self.macs_before,
            "macs_after": self.macs_after,
            "status": self.status,
            "reason": self.reason,
        }


@dataclass
class RewriteLog:
    entries: list[RewriteEntry] = field(default_factory=list)
    inserted_activations: bool = False

    @property
    def replaced(self) -> list[RewriteEntry]:
        return [e for e in self.entries if e.status == "replaced"]

    @property
    def requires_retraining(self) -> bool:
        return any(e.status == "replaced" for e in self.entries)

    def extend(self, other: "RewriteLog") -> None:
        self.entries.extend(other.entries)

    def to_json(self) -> dict:
        return {"entries": [e.to_json() for e in self.entries],
                "inserted_activations": self.inserted_activations,
                "requires_retraining": self.requires_retraining}


def _chain(node: OpNode, k_eff: int) -> list[OpNode]:
    a = node.attrs
    n = (k_eff - 1) // 2
    chain = []
    src = node.inputs
    for i in range(1, n + 1):
        cin = a["in_channels"] if i == 1 else a["out_channels"]
        attrs = conv_attrs(cin, a["out_channels"], 3, 1, 1, a["groups"], bias=(i == n) and a["has_bias"])
        member = OpNode(f"{node.id}#{i}", "Conv2d", attrs, src, node.block_tag)
        chain.append(member)
        src = (member.id,)
    return chain


def _apply_chains(g: Graph, chains: dict[str, list[OpNode]]) -> Graph:
    rename = {old: chain[-1].id for old, chain in chains.items()}
    nodes = []
    for n in g.nodes:
        if n.id in chains:
            nodes.extend(chains[n.id])
            continue
        if any(s in rename for s in n.inputs):
            n = n.replace(inputs=tuple(rename.get(s, s) for s in n.inputs))
        nodes.append(n)
    return g.with_nodes(nodes, [rename.get(o, o) for o in g.outputs])


def _decompose(g: Graph, pass_name: str, select, eligible) -> tuple[Graph, RewriteLog]:
    log = RewriteLog()
    chains: dict[str, list[OpNode]] = {}
    skipped = []
    for n in g.nodes:
        if not n.is_conv or not select(n):
            continue
        reason = eligible(n)
        if reason:
            skipped.append(RewriteEntry(pass_name, n.id, (), status="skipped", reason=reason))
            continue
        a = n.attrs
        chains[n.id] = _chain(n, effective_kernel(a["kernel_h"], a["dilation"]))
    if not chains:
        log.entries.extend(skipped)
        return g, log

    new = _apply_chains(g, chains)
    rf_old, rf_new = receptive_fields(g), receptive_fields(new)
    cost_old, cost_new = graph_cost(g), graph_cost(new)
    entries = {e.original_node_id: e for e in skipped}
    for nid, chain in chains.items():
        ids = tuple(m.id for m in chain)
        entries[nid] = RewriteEntry(
            pass_name, nid, ids, rf_old[nid], rf_new[ids[-1]],
            cost_old.per_node[nid].macs, sum(cost_new.per_node[i].macs for i in ids))
    log.entries.extend(entries[n.id] for n in g.nodes if n.id in entries)
    return new, log


def _same_padded(a) -> bool:
    k_eff = effective_kernel(a["kernel_h"], a["dilation"])
    return a["padding"] == (k_eff - 1) // 2


def replace_large_kernels(g: Graph, max_kernel: int = 3) -> tuple[Graph, RewriteLog]:
    """Split stride-1, ungrouped, same-padded k x k convs (k > max_kernel)
    into chains of 3x3 convs with the same receptive field."""
    if max_kernel < 3:
        raise ValueError("max_kernel must be >= 3")

    def select(n):
        return max(n.attrs["kernel_h"], n.attrs["kernel_w"]) > max_kernel

    def eligible(n):
        a = n.attrs
        if a["kernel_h"] != a["kernel_w"]:
            return "non-square kernel"
        if a["kernel_h"] % 2 == 0:
            return "even kernel"
        if a["stride"] != 1:
            return f"stride {a['stride']} != 1"
        if a["groups"] != 1:
            return f"groups {a['groups']} != 1"
        if not _same_padded(a):
            return "padding does not preserve spatial size"
        return ""

    return _decompose(g, "replace_large_kernels", select, eligible)


def dedilate(g: Graph) -> tuple[Graph, RewriteLog]:
    """Replace dilated stride-1 convs by chains of dense 3x3 convs covering the
    same effective kernel. Grouping is carried over to every chain member."""

    def select(n):
        return n.attrs["dilation"] > 1

    def eligible(n):
        a = n.attrs
        if a["kernel_h"] != a["kernel_w"]:
            return "non-square kernel"
        if a["kernel_h"] % 2 == 0:
            return "even kernel"
        if a["stride"] != 1:
            return f"stride {a['stride']} != 1"
        if not _same_padded(a):
            return "padding does not preserve spatial size"
        return ""

    return _decompose(g, "dedilate", select, eligible)


def replace_activations(g: Graph, from_fn: str, to_fn: str) -> tuple[Graph, RewriteLog]:
    for fn in (from_fn, to_fn):
        if fn not in ACTIVATIONS:
            raise ValueError(f"unknown activation {fn!r}")
    log = RewriteLog()
    nodes = []
    for n in g.nodes:
        if n.op == "Activation" and n.attrs["fn"] == from_fn and from_fn != to_fn:
            n = n.replace(attrs={**n.attrs, "fn": to_fn})
            log.entries.append(RewriteEntry("replace_activations", n.id, (n.id,),
                                            reason=f"{from_fn}->{to_fn}"))
        nodes.append(n)
    if not log.entries:
        return g, log
    return g.with_nodes(nodes), log


# ---------------------------------------------------------------------------
# depth rescaling


def round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


def round_to_multiple(x: float, multiple: int) -> int:
    return max(multiple, multiple * round_half_up(x / multiple))


def block_macs_per_pixel(width: int, block_kind: str) -> int:
    """Per-output-pixel MACs of one width->width block (no projection)."""
    if block_kind == "plain3x3":
        return 9 * width * width
    mid = max(1, width // 4)
    return 2 * width * mid + 9 * mid * mid


def stage_body_macs(spec: StageSpec, input_hw: tuple[int, int] = (64, 64)) -> int:
    """Nominal MACs of the stage bodies: every block runs at its stage width
    on the stage's output grid. Stem and projection convs are excluded, so
    the measure depends only on block counts, widths and strides."""
    h, w = input_hw
    total = 0
    for s in spec.stages:
        h = conv_out_extent(h, 3, s.stride_first, 1)
        w = conv_out_extent(w, 3, s.stride_first, 1)
        total += s.num_blocks * block_macs_per_pixel(s.width, s.block_kind) * h * w
    return total


def depth_rescale(spec: StageSpec, depth_multiplier, rounding_multiple: int = 8,
                  flops_tolerance: float = 0.15,
                  input_hw: tuple[int, int] = (64, 64)) -> StageSpec:
    """Scale block counts by ``depth_multiplier`` and shrink widths by
    ``sqrt(old/new)`` so the stage-body MACs stay within ``flops_tolerance``.

    Block counts round half up; stages whose count does not change keep
    their width.
    """
    spec.check()
    m = Fraction(str(depth_multiplier)) if isinstance(depth_multiplier, float) else Fraction(depth_multiplier)
    if m <= 0:
        raise InvalidSpec("depth_multiplier must be > 0")
    if rounding_multiple < 1:
        raise InvalidSpec("rounding_multiple must be >= 1")
    stages = []
    for i, s in enumerate(spec.stages):
        blocks = round_half_up(s.num_blocks * m)
        if blocks < 1:
            raise InvalidSpec(f"stage {i}: {s.num_blocks} blocks x {m} rounds to {blocks}")
        width = s.width
        if blocks != s.num_blocks:
            width = round_to_multiple(s.width * math.sqrt(s.num_blocks / blocks), rounding_multiple)
        stages.append(Stage(blocks, width, s.block_kind, s.stride_first))
    new = StageSpec(tuple(stages))
    if new == spec:
        return spec
    ratio = stage_body_macs(new, input_hw) / stage_body_macs(spec, input_hw)
    if abs(ratio - 1) > flops_tolerance:
        raise ToleranceExceeded(f"FLOPs ratio {ratio:.4f} outside 1 +/- {flops_tolerance}", ratio)
    return new


def optimize(g: Graph, large_kernels: bool = True, dedilation: bool = True,
             activation_swap: tuple[str, str] | None = None) -> tuple[Graph, RewriteLog]:
    """Run the selected passes in a fixed order: dedilate, kernels, activations."""
    log = RewriteLog()
    if dedilation:
        g, part = dedilate(g)
        log.extend(part)
    if large_kernels:
        g, part = replace_large_kernels(g)
        log.extend(part)
    if activation_swap:
        g, part = replace_activations(g, *activation_swap)
        log.extend(part)
    infer_shapes(g)
    return g, log
