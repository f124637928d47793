"""Naive reference interpreter used as the numerical oracle.

Convolution is evaluated directly: one strided slice of the zero-padded
input per kernel tap, accumulated in float64 and rounded to float32 when
the node's result is stored. Clarity over speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import MissingWeights, ShapeMismatch
from .graph_ir import Graph, OpNode, topological_order
from .tensor_io import load_weight_dir, save_weight_dir

PRELU_DEFAULT_SLOPE = 0.25


@dataclass
class WeightStore:
    """Conv weights ``[out, in/groups, kh, kw]`` and optional biases ``[out]``.

    PReLU nodes may also appear here with a per-channel slope vector.
    """

    weights: dict[str, np.ndarray] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.biases.items()})

    def check(self, g: Graph) -> None:
        for n in g.convs():
            if n.id not in self.weights:
                raise MissingWeights(f"no weights for conv {n.id!r}")
            a = n.attrs
            expected = (a["out_channels"], a["in_channels"] // a["groups"], a["kernel_h"], a["kernel_w"])
            if self.weights[n.id].shape != expected:
                raise ShapeMismatch(f"weights of {n.id!r} have shape {self.weights[n.id].shape}, "
                                    f"expected {expected}", n.id)
            if n.id in self.biases and self.biases[n.id].shape != (a["out_channels"],):
                raise ShapeMismatch(f"bias of {n.id!r} has shape {self.biases[n.id].shape}", n.id)

    def save(self, directory) -> list[Path]:
        return save_weight_dir(directory, self.weights, self.biases)

    @classmethod
    def load(cls, directory) -> "WeightStore":
        return cls(*load_weight_dir(directory))


def init_weights(g: Graph, seed: int = 0, bias_scale: float = 0.1) -> WeightStore:
    """He-normal conv weights and small uniform biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for n in g.convs():
        a = n.attrs
        fan_in = (a["in_channels"] // a["groups"]) * a["kernel_h"] * a["kernel_w"]
        shape = (a["out_channels"], a["in_channels"] // a["groups"], a["kernel_h"], a["kernel_w"])
        store.weights[n.id] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        if a["has_bias"]:
            store.biases[n.id] = rng.uniform(-bias_scale, bias_scale, a["out_channels"]).astype(np.float32)
    return store


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int, padding: int,
           dilation: int, groups: int) -> np.ndarray:
    c, h, wd = x.shape
    out_ch, cin_g, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (padding, padding), (padding, padding)))
    w64 = w.astype(np.float64)
    out = np.zeros((out_ch, ho, wo), dtype=np.float64)
    cout_g = out_ch // groups
    for g in range(groups):
        xs = xp[g * cin_g:(g + 1) * cin_g]
        wg = w64[g * cout_g:(g + 1) * cout_g]
        acc = out[g * cout_g:(g + 1) * cout_g]
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                patch = xs[:, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
                acc += np.tensordot(wg[:, :, i, j], patch, axes=([1], [0]))
    if b is not None:
        out += b.astype(np.float64)[:, None, None]
    return out.astype(np.float32)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return 1.0 / (1.0 + np.exp(-x))


def activation(fn: str, x: np.ndarray, slope: np.ndarray | None = None) -> np.ndarray:
    if fn == "relu":
        y = np.maximum(x, 0)
    elif fn == "hardtanh":
        y = np.clip(x, -1.0, 1.0)
    elif fn == "sigmoid":
        y = sigmoid(x)
    elif fn == "swish":
        y = x.astype(np.float64) * sigmoid(x)
    elif fn == "prelu":
        if slope is None:
            slope = np.full(x.shape[0], PRELU_DEFAULT_SLOPE)
        s = slope.astype(np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
        y = np.where(x >= 0, x.astype(np.float64), s * x)
    else:
        raise ValueError(f"unknown activation {fn!r}")
    return np.asarray(y).astype(np.float32)


def max_pool(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    out = np.full((c, ho, wo), -np.inf, dtype=np.float32)
    for i in range(kernel):
        for j in range(kernel):
            out = np.maximum(out, xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride])
    return out


def _bilinear_axis(n_in: int, scale: int):
    dst = np.arange(n_in * scale, dtype=np.float64)
    src = np.maximum((dst + 0.5) / scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample(x: np.ndarray, scale: int, mode: str) -> np.ndarray:
    """Nearest or bilinear upsampling (half-pixel centres, align_corners=False)."""
    if mode == "nearest":
        return np.repeat(np.repeat(x, scale, axis=1), scale, axis=2)
    _, h, w = x.shape
    y0, y1, fy = _bilinear_axis(h, scale)
    x0, x1, fx = _bilinear_axis(w, scale)
    v = x.astype(np.float64)
    top = v[:, y0][:, :, x0] * (1 - fx) + v[:, y0][:, :, x1] * fx
    bot = v[:, y1][:, :, x0] * (1 - fx) + v[:, y1][:, :, x1] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)


def run_node(node: OpNode, args: list[np.ndarray], w: WeightStore) -> np.ndarray:
    a = node.attrs
    if node.op == "Conv2d":
        if node.id not in w.weights:
            raise MissingWeights(f"no weights for conv {node.id!r}")
        bias = w.biases.get(node.id) if a["has_bias"] else None
        return conv2d(args[0], w.weights[node.id], bias, a["stride"], a["padding"], a["dilation"],
                      a["groups"])
    if node.op == "Activation":
        return activation(a["fn"], args[0], w.weights.get(node.id))
    if node.op == "Add":
        acc = np.zeros(args[0].shape, dtype=np.float64)
        for t in args:
            acc += t
        return acc.astype(np.float32)
    if node.op == "Concat":
        return np.concatenate(args, axis=0)
    if node.op == "Upsample":
        return upsample(args[0], a["scale"], a["mode"])
    if node.op == "MaxPool":
        return max_pool(args[0], a["kernel"], a["stride"], a["padding"])
    raise ValueError(f"unknown op {node.op!r}")


def run(g: Graph, w: WeightStore, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate ``g`` and return its declared outputs keyed by id."""
    values: dict[str, np.ndarray] = {}
    for spec in g.inputs:
        if spec.name not in inputs:
            raise ShapeMismatch(f"missing input {spec.name!r}")
        arr = np.asarray(inputs[spec.name], dtype=np.float32)
        if arr.shape != spec.shape:
            raise ShapeMismatch(f"input {spec.name!r} has shape {arr.shape}, expected {spec.shape}")
        values[spec.name] = arr
    order = topological_order(g)
    remaining = {}
    for n in g.nodes:
        for s in n.inputs:
            remaining[s] = remaining.get(s, 0) + 1
    keep = set(g.outputs)
    for nid in order:
        node = g.node(nid)
        values[nid] = run_node(node, [values[s] for s in node.inputs], w)
        for s in node.inputs:
            remaining[s] -= 1
            if remaining[s] == 0 and s not in keep:
                del values[s]
    return {o: values[o] for o in g.outputs}


def random_inputs(g: Graph, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {i.name: rng.standard_normal(i.shape).astype(np.float32) for i in g.inputs}
