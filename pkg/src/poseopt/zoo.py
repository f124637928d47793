"""Graph builders for the bundled fixtures.

``lightweight_openpose`` transcribes the public Lightweight OpenPose network
(MobileNet-v1 trunk with a dilated conv5 block, CPM, initial stage and one
refinement stage). ``openpose_vgg`` transcribes the original six-stage
OpenPose network whose refinement stages use 7x7 convolutions. BatchNorm is
folded into conv biases and ELU is mapped to relu; neither changes the
parameter or MAC accounting beyond the folded biases.
"""

from __future__ import annotations

from .graph_ir import Graph, GraphInput, OpNode, conv_attrs

NUM_HEATMAPS = 19  # 18 joints + background
NUM_PAFS = 38  # 19 limbs x (x, y)


class _Builder:
    def __init__(self):
        self.nodes: list[OpNode] = []

    def conv(self, nid, src, in_ch, out_ch, k=3, stride=1, dilation=1, groups=1, bias=True,
             tag="Backbone", act: str | None = "relu"):
        self.nodes.append(OpNode(nid, "Conv2d", conv_attrs(in_ch, out_ch, k, stride, dilation,
                                                            groups, bias), (src,), tag))
        if act is None:
            return nid
        self.nodes.append(OpNode(f"{nid}_act", "Activation", {"fn": act}, (nid,), tag))
        return f"{nid}_act"

    def conv_dw(self, nid, src, in_ch, out_ch, stride=1, dilation=1, tag="Backbone"):
        x = self.conv(f"{nid}_dw", src, in_ch, in_ch, 3, stride, dilation, groups=in_ch,
                      bias=True, tag=tag)
        return self.conv(f"{nid}_pw", x, in_ch, out_ch, 1, tag=tag)

    def op(self, nid, op, inputs, tag, attrs=None):
        self.nodes.append(OpNode(nid, op, attrs or {}, tuple(inputs), tag))
        return nid


def lightweight_openpose(height: int = 368, width: int = 368, num_refinement_stages: int = 1,
                         num_channels: int = 128) -> Graph:
    b = _Builder()
    x = b.conv("conv1", "image", 3, 32, stride=2)
    trunk = [(32, 64, 1, 1), (64, 128, 2, 1), (128, 128, 1, 1), (128, 256, 2, 1),
             (256, 256, 1, 1), (256, 512, 1, 1), (512, 512, 1, 2), (512, 512, 1, 1),
             (512, 512, 1, 1), (512, 512, 1, 1), (512, 512, 1, 1)]
    for i, (cin, cout, stride, dil) in enumerate(trunk, start=2):
        x = b.conv_dw(f"mb{i}", x, cin, cout, stride, dil)

    # CPM: 1x1 align, residual depthwise trunk, 3x3 fuse
    align = b.conv("cpm_align", x, 512, num_channels, 1)
    y = align
    for i in range(3):
        y = b.conv_dw(f"cpm_trunk{i}", y, num_channels, num_channels)
    s = b.op("cpm_add", "Add", [align, y], "Backbone")
    features = b.conv("cpm_conv", s, num_channels, num_channels)

    y = features
    for i in range(3):
        y = b.conv(f"init_trunk{i}", y, num_channels, num_channels, tag="InitialStage")
    h = b.conv("init_heat0", y, num_channels, 512, 1, tag="HeatmapBranch")
    heat = b.conv("init_heat1", h, 512, NUM_HEATMAPS, 1, tag="HeatmapBranch", act=None)
    p = b.conv("init_paf0", y, num_channels, 512, 1, tag="PafBranch")
    paf = b.conv("init_paf1", p, 512, NUM_PAFS, 1, tag="PafBranch", act=None)

    stage_in_ch = num_channels + NUM_HEATMAPS + NUM_PAFS
    for r in range(num_refinement_stages):
        z = b.op(f"ref{r}_cat", "Concat", [features, heat, paf], "Other")
        cin = stage_in_ch
        for k in range(5):
            pre = f"ref{r}_blk{k}"
            init = b.conv(f"{pre}_initial", z, cin, num_channels, 1, tag="Other")
            t = b.conv(f"{pre}_trunk0", init, num_channels, num_channels, tag="Other")
            t = b.conv(f"{pre}_trunk1", t, num_channels, num_channels, dilation=2, tag="Other")
            z = b.op(f"{pre}_add", "Add", [init, t], "Other")
            cin = num_channels
        h = b.conv(f"ref{r}_heat0", z, num_channels, num_channels, 1, tag="HeatmapBranch")
        heat = b.conv(f"ref{r}_heat1", h, num_channels, NUM_HEATMAPS, 1, tag="HeatmapBranch",
                      act=None)
        p = b.conv(f"ref{r}_paf0", z, num_channels, num_channels, 1, tag="PafBranch")
        paf = b.conv(f"ref{r}_paf1", p, num_channels, NUM_PAFS, 1, tag="PafBranch", act=None)

    return Graph("lightweight_openpose", (GraphInput("image", (3, height, width)),),
                 tuple(b.nodes), (heat, paf))


def openpose_vgg(height: int = 368, width: int = 368, stages: int = 6) -> Graph:
    b = _Builder()
    x = "image"
    vgg = [(3, 64), (64, 64), "pool", (64, 128), (128, 128), "pool",
           (128, 256), (256, 256), (256, 256), (256, 256), "pool",
           (256, 512), (512, 512)]
    pools = 0
    for i, item in enumerate(vgg):
        if item == "pool":
            pools += 1
            x = b.op(f"pool{pools}", "MaxPool", [x], "Backbone",
                     {"kernel": 2, "stride": 2, "padding": 0})
        else:
            x = b.conv(f"vgg{i}", x, *item)
    x = b.conv("conv4_3_cpm", x, 512, 256)
    features = b.conv("conv4_4_cpm", x, 256, 128)

    def branch(prefix, src, cin, out_ch, k, n_convs, hidden, tag):
        y, c = src, cin
        for j in range(n_convs):
            y = b.conv(f"{prefix}_conv{j}", y, c, 128, k, tag=tag)
            c = 128
        y = b.conv(f"{prefix}_conv{n_convs}", y, 128, hidden, 1, tag=tag)
        return b.conv(f"{prefix}_out", y, hidden, out_ch, 1, tag=tag, act=None)

    paf = branch("s1_paf", features, 128, NUM_PAFS, 3, 3, 512, "PafBranch")
    heat = branch("s1_heat", features, 128, NUM_HEATMAPS, 3, 3, 512, "HeatmapBranch")
    for t in range(2, stages + 1):
        z = b.op(f"s{t}_cat", "Concat", [paf, heat, features], "Other")
        cin = NUM_PAFS + NUM_HEATMAPS + 128
        paf = branch(f"s{t}_paf", z, cin, NUM_PAFS, 7, 5, 128, "PafBranch")
        heat = branch(f"s{t}_heat", z, cin, NUM_HEATMAPS, 7, 5, 128, "HeatmapBranch")

    return Graph("openpose_vgg", (GraphInput("image", (3, height, width)),),
                 tuple(b.nodes), (paf, heat))


def toy_pose_net(height: int = 32, width: int = 32) -> Graph:
    """A small two-branch network for sensitivity scans and executor tests."""
    b = _Builder()
    x = b.conv("bb0", "image", 3, 8, stride=2)
    x = b.conv("bb1", x, 8, 16)
    x = b.conv("bb2", x, 16, 16, dilation=2)
    x = b.conv("init0", x, 16, 16, 5, tag="InitialStage")
    heat = b.conv("heat_out", x, 16, 4, 1, tag="HeatmapBranch", act=None)
    p = b.conv("paf0", x, 16, 16, tag="PafBranch", act="swish")
    paf = b.conv("paf_out", p, 16, 6, 1, tag="PafBranch", act=None)
    up = b.op("paf_up", "Upsample", [paf], "Other", {"scale": 2, "mode": "bilinear"})
    return Graph("toy_pose_net", (GraphInput("image", (3, height, width)),),
                 tuple(b.nodes), (heat, up))


BUILDERS = {
    "lwop": lightweight_openpose,
    "openpose_vgg": openpose_vgg,
    "toy": toy_pose_net,
}
