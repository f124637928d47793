"""Independent reference implementations the package is checked against."""

import math


def brute_conv2d(x, w, b, stride, padding, dilation, groups):
    """Direct convolution with six explicit loops over Python floats.

    ``x`` is [C][H][W] nested lists (or an array), ``w`` is [O][C/g][kh][kw].
    """
    c_in, h, wd = len(x), len(x[0]), len(x[0][0])
    c_out, cpg, kh, kw = len(w), len(w[0]), len(w[0][0]), len(w[0][0][0])
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    opg = c_out // groups
    out = [[[0.0] * wo for _ in range(ho)] for _ in range(c_out)]
    for o in range(c_out):
        grp = o // opg
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for ci in range(cpg):
                    for i in range(kh):
                        for j in range(kw):
                            r = y * stride - padding + i * dilation
                            s = xx * stride - padding + j * dilation
                            if 0 <= r < h and 0 <= s < wd:
                                acc += float(x[grp * cpg + ci][r][s]) * float(w[o][ci][i][j])
                out[o][y][xx] = acc
    return out


def segment_distance(p, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    t = 0.0 if ll == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / ll))
    return math.hypot(p[0] - ax - t * dx, p[1] - ay - t * dy)
