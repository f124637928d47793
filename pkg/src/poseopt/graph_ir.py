"""Computation-graph data model: parsing, validation, shape inference.

Shapes are per sample and channels-first, ``(C, H, W)``. A node input is
either a graph input name or another node's id.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

from .errors import (CycleDetected, DanglingEdge, DuplicateId, GraphError, InvalidSpec,
                     SchemaError, ShapeMismatch)

TensorShape = tuple[int, ...]

OP_KINDS = ("Conv2d", "Activation", "Add", "Concat", "Upsample", "MaxPool")
ACTIVATIONS = ("relu", "prelu", "swish", "hardtanh", "sigmoid")
UPSAMPLE_MODES = ("nearest", "bilinear")
BLOCK_TAGS = ("Backbone", "InitialStage", "HeatmapBranch", "PafBranch", "Other")

CONV_ATTRS = ("kernel_h", "kernel_w", "stride", "padding", "dilation",
              "in_channels", "out_channels", "groups", "has_bias")
ATTR_KEYS: dict[str, tuple[str, ...]] = {
    "Conv2d": CONV_ATTRS,
    "Activation": ("fn",),
    "Add": (),
    "Concat": (),
    "Upsample": ("scale", "mode"),
    "MaxPool": ("kernel", "stride", "padding"),
}


@dataclass(frozen=True)
class OpNode:
    id: str
    op: str
    attrs: Mapping[str, Any] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()
    block_tag: str = "Other"

    def __post_init__(self):
        object.__setattr__(self, "attrs", dict(self.attrs))
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @property
    def is_conv(self) -> bool:
        return self.op == "Conv2d"

    def replace(self, **changes) -> "OpNode":
        values = {"id": self.id, "op": self.op, "attrs": self.attrs,
                  "inputs": self.inputs, "block_tag": self.block_tag}
        values.update(changes)
        return OpNode(**values)


@dataclass(frozen=True)
class GraphInput:
    name: str
    shape: TensorShape

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))


@dataclass(frozen=True)
class Graph:
    name: str
    inputs: tuple[GraphInput, ...]
    nodes: tuple[OpNode, ...]
    outputs: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @cached_property
    def index(self) -> dict[str, OpNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def input_shapes(self) -> dict[str, TensorShape]:
        return {i.name: i.shape for i in self.inputs}

    def node(self, node_id: str) -> OpNode:
        return self.index[node_id]

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self.nodes:
            for src in n.inputs:
                out.setdefault(src, []).append(n.id)
        return out

    def convs(self) -> list[OpNode]:
        return [n for n in self.nodes if n.is_conv]

    def with_nodes(self, nodes: Iterable[OpNode], outputs: Sequence[str] | None = None) -> "Graph":
        return Graph(self.name, self.inputs, tuple(nodes),
                     self.outputs if outputs is None else tuple(outputs))

    def with_input_shape(self, shape: TensorShape) -> "Graph":
        if len(self.inputs) != 1:
            raise SchemaError("input shape override needs a single-input graph")
        return Graph(self.name, (GraphInput(self.inputs[0].name, shape),), self.nodes, self.outputs)


@dataclass(frozen=True)
class Violation:
    kind: str
    node_id: str | None
    message: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "node": self.node_id, "message": self.message}


# ---------------------------------------------------------------------------
# serialization


def _expect_keys(obj: Mapping, required: Iterable[str], where: str) -> None:
    if not isinstance(obj, Mapping):
        raise SchemaError(f"{where}: expected an object")
    required = set(required)
    missing = required - set(obj)
    extra = set(obj) - required
    if missing:
        raise SchemaError(f"{where}: missing field(s) {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unexpected field(s) {sorted(extra)}")


def _check_int(value, where: str, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise SchemaError(f"{where}: expected integer >= {minimum}, got {value!r}")


def _check_attrs(node_id: str, op: str, attrs: Mapping) -> None:
    where = f"node {node_id!r} attrs"
    _expect_keys(attrs, ATTR_KEYS[op], where)
    if op == "Conv2d":
        for key in ("kernel_h", "kernel_w", "stride", "dilation", "in_channels",
                    "out_channels", "groups"):
            _check_int(attrs[key], f"{where}.{key}", 1)
        _check_int(attrs["padding"], f"{where}.padding", 0)
        if not isinstance(attrs["has_bias"], bool):
            raise SchemaError(f"{where}.has_bias: expected boolean")
    elif op == "Activation":
        if attrs["fn"] not in ACTIVATIONS:
            raise SchemaError(f"{where}.fn: unknown activation {attrs['fn']!r}")
    elif op == "Upsample":
        _check_int(attrs["scale"], f"{where}.scale", 1)
        if attrs["mode"] not in UPSAMPLE_MODES:
            raise SchemaError(f"{where}.mode: unknown mode {attrs['mode']!r}")
    elif op == "MaxPool":
        _check_int(attrs["kernel"], f"{where}.kernel", 1)
        _check_int(attrs["stride"], f"{where}.stride", 1)
        _check_int(attrs["padding"], f"{where}.padding", 0)


def graph_from_dict(doc: Mapping) -> Graph:
    """Build a graph from a decoded JSON document, enforcing the schema.

    Raises the first structural problem found (``SchemaError``,
    ``DuplicateId``, ``DanglingEdge``), then any cycle or shape error.
    """
    _expect_keys(doc, ("name", "inputs", "nodes", "outputs"), "graph")
    if not isinstance(doc["name"], str):
        raise SchemaError("graph.name: expected string")
    inputs = []
    for i, item in enumerate(doc["inputs"]):
        _expect_keys(item, ("name", "shape"), f"inputs[{i}]")
        shape = item["shape"]
        if not isinstance(shape, list) or len(shape) not in (1, 3):
            raise SchemaError(f"inputs[{i}].shape: expected [C,H,W] or [C]")
        for d in shape:
            _check_int(d, f"inputs[{i}].shape", 1)
        inputs.append(GraphInput(item["name"], tuple(shape)))
    nodes = []
    for i, item in enumerate(doc["nodes"]):
        _expect_keys(item, ("id", "op", "attrs", "inputs", "block_tag"), f"nodes[{i}]")
        if not isinstance(item["id"], str) or not item["id"]:
            raise SchemaError(f"nodes[{i}].id: expected non-empty string")
        if item["op"] not in OP_KINDS:
            raise SchemaError(f"node {item['id']!r}: unknown op {item['op']!r}")
        if item["block_tag"] not in BLOCK_TAGS:
            raise SchemaError(f"node {item['id']!r}: unknown block_tag {item['block_tag']!r}")
        if not isinstance(item["inputs"], list) or not all(isinstance(s, str) for s in item["inputs"]):
            raise SchemaError(f"node {item['id']!r}: inputs must be a list of strings")
        _check_attrs(item["id"], item["op"], item["attrs"])
        nodes.append(OpNode(item["id"], item["op"], item["attrs"], tuple(item["inputs"]),
                            item["block_tag"]))
    if not isinstance(doc["outputs"], list) or not all(isinstance(s, str) for s in doc["outputs"]):
        raise SchemaError("graph.outputs: expected a list of strings")
    g = Graph(doc["name"], tuple(inputs), tuple(nodes), tuple(doc["outputs"]))
    violations = validate(g)
    if violations:
        v = violations[0]
        raise _ERROR_TYPES.get(v.kind, GraphError)(v.message, v.node_id)
    return g


def parse_graph(text: str) -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc}") from None
    return graph_from_dict(doc)


def load_graph(path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        return parse_graph(fh.read())


def graph_to_dict(g: Graph) -> dict:
    return {
        "name": g.name,
        "inputs": [{"name": i.name, "shape": list(i.shape)} for i in g.inputs],
        "nodes": [{"id": n.id, "op": n.op, "attrs": dict(n.attrs), "inputs": list(n.inputs),
                   "block_tag": n.block_tag} for n in g.nodes],
        "outputs": list(g.outputs),
    }


def serialize_graph(g: Graph) -> str:
    return json.dumps(graph_to_dict(g), indent=1)


# ---------------------------------------------------------------------------
# validation and shapes

_ERROR_TYPES = {
    "SchemaError": SchemaError,
    "DuplicateId": DuplicateId,
    "DanglingEdge": DanglingEdge,
    "CycleDetected": CycleDetected,
    "ShapeMismatch": ShapeMismatch,
}


def topological_order(g: Graph) -> list[str]:
    """Kahn's algorithm; ready nodes are taken in declaration order."""
    position = {n.id: i for i, n in enumerate(g.nodes)}
    indegree = {n.id: 0 for n in g.nodes}
    users: dict[str, list[str]] = {}
    for n in g.nodes:
        for src in n.inputs:
            if src in position:
                indegree[n.id] += 1
                users.setdefault(src, []).append(n.id)
    ready = [position[k] for k, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = g.nodes[heapq.heappop(ready)].id
        order.append(nid)
        for user in users.get(nid, ()):
            indegree[user] -= 1
            if indegree[user] == 0:
                heapq.heappush(ready, position[user])
    if len(order) != len(g.nodes):
        stuck = next(n.id for n in g.nodes if indegree[n.id] > 0)
        raise CycleDetected(f"graph has a cycle through node {stuck!r}", stuck)
    return order


def conv_out_extent(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def node_output_shape(node: OpNode, in_shapes: Sequence[TensorShape]) -> TensorShape:
    """Shape rule for one node; raises ShapeMismatch naming the node."""
    a = node.attrs

    def fail(msg: str):
        raise ShapeMismatch(f"node {node.id!r}: {msg}", node.id)

    single = node.op in ("Conv2d", "Activation", "Upsample", "MaxPool")
    if single and len(in_shapes) != 1:
        fail(f"{node.op} takes exactly one input, got {len(in_shapes)}")
    if not in_shapes:
        fail(f"{node.op} needs at least one input")
    if node.op in ("Conv2d", "Upsample", "MaxPool", "Concat"):
        for s in in_shapes:
            if len(s) != 3:
                fail(f"{node.op} needs (C,H,W) inputs, got {s}")

    if node.op == "Conv2d":
        c, h, w = in_shapes[0]
        if c != a["in_channels"]:
            fail(f"input has {c} channels, conv expects {a['in_channels']}")
        if a["in_channels"] % a["groups"] or a["out_channels"] % a["groups"]:
            fail("channels not divisible by groups")
        if a["kernel_h"] % 2 == 0 or a["kernel_w"] % 2 == 0:
            fail("even conv kernels are not supported")
        ho = conv_out_extent(h, a["kernel_h"], a["stride"], a["padding"], a["dilation"])
        wo = conv_out_extent(w, a["kernel_w"], a["stride"], a["padding"], a["dilation"])
        if ho < 1 or wo < 1:
            fail(f"output extent {ho}x{wo} is empty")
        return (a["out_channels"], ho, wo)
    if node.op == "Activation":
        return in_shapes[0]
    if node.op == "Add":
        if len(in_shapes) < 2:
            fail("Add needs at least two inputs")
        if any(s != in_shapes[0] for s in in_shapes):
            fail(f"Add input shapes differ: {list(in_shapes)}")
        return in_shapes[0]
    if node.op == "Concat":
        if any(s[1:] != in_shapes[0][1:] for s in in_shapes):
            fail(f"Concat inputs differ in H,W: {list(in_shapes)}")
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]
    if node.op == "Upsample":
        c, h, w = in_shapes[0]
        return (c, h * a["scale"], w * a["scale"])
    if node.op == "MaxPool":
        c, h, w = in_shapes[0]
        ho = conv_out_extent(h, a["kernel"], a["stride"], a["padding"])
        wo = conv_out_extent(w, a["kernel"], a["stride"], a["padding"])
        if ho < 1 or wo < 1:
            fail(f"output extent {ho}x{wo} is empty")
        return (c, ho, wo)
    raise SchemaError(f"node {node.id!r}: unknown op {node.op!r}", node.id)


def infer_shapes(g: Graph, order: Sequence[str] | None = None) -> dict[str, TensorShape]:
    """Map every node id (and graph input name) to its output shape.

    ``order`` may be any topological order; the result does not depend on it.
    """
    if order is None:
        order = topological_order(g)
    shapes: dict[str, TensorShape] = dict(g.input_shapes)
    for nid in order:
        node = g.node(nid)
        missing = [s for s in node.inputs if s not in shapes]
        if missing:
            raise DanglingEdge(f"node {nid!r} reads undefined {missing[0]!r}", nid)
        shapes[nid] = node_output_shape(node, [shapes[s] for s in node.inputs])
    return shapes


def output_shapes(g: Graph) -> list[TensorShape]:
    shapes = infer_shapes(g)
    return [shapes[o] for o in g.outputs]


def validate(g: Graph) -> list[Violation]:
    """Return every invariant violation found; an empty list means valid."""
    out: list[Violation] = []
    seen: set[str] = set()
    input_names = set(g.input_shapes)
    for n in g.nodes:
        if n.id in seen or n.id in input_names:
            out.append(Violation("DuplicateId", n.id, f"id {n.id!r} defined twice"))
        seen.add(n.id)
    for n in g.nodes:
        if n.op not in OP_KINDS:
            out.append(Violation("SchemaError", n.id, f"unknown op {n.op!r}"))
            continue
        if n.block_tag not in BLOCK_TAGS:
            out.append(Violation("SchemaError", n.id, f"unknown block_tag {n.block_tag!r}"))
        try:
            _check_attrs(n.id, n.op, n.attrs)
        except SchemaError as exc:
            out.append(Violation("SchemaError", n.id, str(exc)))
        for src in n.inputs:
            if src not in seen and src not in input_names:
                out.append(Violation("DanglingEdge", n.id, f"node {n.id!r} reads unknown {src!r}"))
    for o in g.outputs:
        if o not in seen and o not in input_names:
            out.append(Violation("DanglingEdge", None, f"output {o!r} does not exist"))
    if out:
        return out
    try:
        order = topological_order(g)
    except CycleDetected as exc:
        return [Violation("CycleDetected", exc.node_id, str(exc))]
    shapes: dict[str, TensorShape] = dict(g.input_shapes)
    for nid in order:
        node = g.node(nid)
        if any(s not in shapes for s in node.inputs):
            continue  # upstream failure already reported
        try:
            shapes[nid] = node_output_shape(node, [shapes[s] for s in node.inputs])
        except GraphError as exc:
            out.append(Violation("ShapeMismatch", nid, str(exc)))
    return out


def conv_layer_count(g: Graph) -> int:
    return sum(1 for n in g.nodes if n.is_conv)


# ---------------------------------------------------------------------------
# backbone builder

BLOCK_KINDS = ("plain3x3", "bottleneck")


@dataclass(frozen=True)
class Stage:
    num_blocks: int
    width: int
    block_kind: str = "plain3x3"
    stride_first: int = 1


@dataclass(frozen=True)
class StageSpec:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def check(self) -> None:
        if not self.stages:
            raise InvalidSpec("StageSpec needs at least one stage")
        for i, s in enumerate(self.stages):
            if s.num_blocks < 1:
                raise InvalidSpec(f"stage {i}: num_blocks must be >= 1, got {s.num_blocks}")
            if s.width < 1:
                raise InvalidSpec(f"stage {i}: width must be >= 1, got {s.width}")
            if s.block_kind not in BLOCK_KINDS:
                raise InvalidSpec(f"stage {i}: unknown block_kind {s.block_kind!r}")
            if s.stride_first < 1:
                raise InvalidSpec(f"stage {i}: stride_first must be >= 1")

    def to_json(self) -> dict:
        return {"stages": [{"num_blocks": s.num_blocks, "width": s.width,
                            "block_kind": s.block_kind, "stride_first": s.stride_first}
                           for s in self.stages]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "StageSpec":
        try:
            return cls(tuple(Stage(**s) for s in doc["stages"]))
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"bad StageSpec document: {exc}") from None


def conv_attrs(in_ch: int, out_ch: int, k: int = 3, stride: int = 1, dilation: int = 1,
               groups: int = 1, bias: bool = True, padding: int | None = None) -> dict:
    if padding is None:
        padding = dilation * (k - 1) // 2
    return {"kernel_h": k, "kernel_w": k, "stride": stride, "padding": padding,
            "dilation": dilation, "in_channels": in_ch, "out_channels": out_ch,
            "groups": groups, "has_bias": bias}


def build_backbone(spec: StageSpec, in_channels: int, input_hw: tuple[int, int] = (368, 368),
                   activation: str = "relu", name: str = "backbone") -> Graph:
    """Chain the stages of ``spec`` into a Backbone-tagged graph.

    Bottleneck blocks reduce to ``max(1, width // 4)`` channels; when the
    block changes channel count or stride, the shortcut gets a 1x1
    projection conv so the residual Add stays shape-valid.
    """
    spec.check()
    if in_channels < 1:
        raise InvalidSpec("in_channels must be >= 1")
    nodes: list[OpNode] = []
    prev, prev_ch = "input", in_channels

    def add(nid, op, attrs, inputs):
        nodes.append(OpNode(nid, op, attrs, tuple(inputs), "Backbone"))
        return nid

    for si, stage in enumerate(spec.stages):
        for bi in range(stage.num_blocks):
            stride = stage.stride_first if bi == 0 else 1
            tag = f"s{si}b{bi}"
            w = stage.width
            if stage.block_kind == "plain3x3":
                c = add(f"{tag}_conv", "Conv2d", conv_attrs(prev_ch, w, 3, stride), [prev])
                prev = add(f"{tag}_act", "Activation", {"fn": activation}, [c])
            else:
                mid = max(1, w // 4)
                r = add(f"{tag}_reduce", "Conv2d", conv_attrs(prev_ch, mid, 1), [prev])
                ra = add(f"{tag}_reduce_act", "Activation", {"fn": activation}, [r])
                m = add(f"{tag}_conv", "Conv2d", conv_attrs(mid, mid, 3, stride), [ra])
                ma = add(f"{tag}_conv_act", "Activation", {"fn": activation}, [m])
                e = add(f"{tag}_expand", "Conv2d", conv_attrs(mid, w, 1), [ma])
                shortcut = prev
                if prev_ch != w or stride != 1:
                    shortcut = add(f"{tag}_proj", "Conv2d", conv_attrs(prev_ch, w, 1, stride), [prev])
                s = add(f"{tag}_add", "Add", {}, [e, shortcut])
                prev = add(f"{tag}_act", "Activation", {"fn": activation}, [s])
            prev_ch = w
    return Graph(name, (GraphInput("input", (in_channels,) + tuple(input_hw)),), tuple(nodes), (prev,))
