"""Ground-truth pose scenes and their heatmap/PAF renderings.

Randomness comes from SplitMix64 so scenes are reproducible bit-for-bit in
any language: pose sampling walks the sequence one draw at a time, noise
uses the counter form ``mix(seed + (i + 1) * GAMMA)`` vectorised over the
tensor, four 16-bit noise lanes per 64-bit output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import PlacementFailed
from .paf_decoder import COCO_SKELETON, SkeletonSpec

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        """Double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53


def splitmix64_block(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset .. offset + count - 1`` of the SplitMix64 stream."""
    with np.errstate(over="ignore"):
        idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
        z = np.uint64(seed & MASK64) + idx * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def uniform_noise(seed: int, count: int, amplitude: float) -> np.ndarray:
    """float32 noise in (-amplitude, amplitude).

    Each 64-bit output yields four 16-bit lanes, lowest bits first; lane
    value ``v`` maps to ``(2 * (v + 0.5) / 65536 - 1) * amplitude``.
    """
    raw = splitmix64_block(seed, (count + 3) // 4)
    # explicit little-endian view: lane order is low bits first on any host
    lanes = raw.astype("<u8", copy=False).view("<u2")
    v = lanes[:count].astype(np.float32)
    scale = np.float32(2.0 * amplitude / 65536.0)
    return (v + np.float32(0.5)) * scale - np.float32(amplitude)


# Upright COCO-18 template, neck at the origin, unit = person scale (px).
COCO_TEMPLATE = (
    (0.00, -0.20), (0.00, 0.00), (-0.16, 0.00), (-0.22, 0.22), (-0.25, 0.42), (0.16, 0.00),
    (0.22, 0.22), (0.25, 0.42), (-0.10, 0.45), (-0.11, 0.72), (-0.12, 0.98), (0.10, 0.45),
    (0.11, 0.72), (0.12, 0.98), (-0.05, -0.26), (0.05, -0.26), (-0.10, -0.22), (0.10, -0.22),
)


@dataclass(frozen=True)
class RenderConfig:
    height: int = 368
    width: int = 368
    gaussian_sigma: float = 2.0
    limb_width: float = 4.0
    noise_amplitude: float = 0.0
    noise_seed: int = 0
    min_person_separation: float = 24.0
    margin: float = 8.0
    scale_range: tuple[float, float] = (48.0, 96.0)

    def __post_init__(self):
        if self.gaussian_sigma <= 0 or self.limb_width <= 0:
            raise ValueError("gaussian_sigma and limb_width must be > 0")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "scale_range", tuple(self.scale_range))

    def to_json(self) -> dict:
        out = asdict(self)
        out["scale_range"] = list(self.scale_range)
        return out

    @classmethod
    def from_json(cls, doc: Mapping) -> "RenderConfig":
        return cls(**doc)


@dataclass(frozen=True)
class GroundTruthPose:
    person_id: int
    joints: tuple[tuple[float, float], ...]

    def to_json(self) -> dict:
        return {"id": self.person_id, "joints": [list(p) for p in self.joints]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "GroundTruthPose":
        return cls(int(doc["id"]), tuple((float(x), float(y)) for x, y in doc["joints"]))


def _point_segment(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(ll > 0, ((px - ax) * dx + (py - ay) * dy) / ll, 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def _segments(pose: "GroundTruthPose", skel: SkeletonSpec) -> np.ndarray:
    j = np.asarray(pose.joints, dtype=np.float64)
    idx = np.asarray(skel.limbs)
    return np.concatenate([j[idx[:, 0]], j[idx[:, 1]]], axis=1)  # (L, 4): ax ay bx by


def person_distance(p: "GroundTruthPose", q: "GroundTruthPose", skel: SkeletonSpec) -> float:
    """Closest approach between two skeletons, limbs taken as segments."""
    s = _segments(p, skel)[:, None, :]
    t = _segments(q, skel)[None, :, :]
    ax, ay, bx, by = (s[..., i] for i in range(4))
    cx, cy, dx, dy = (t[..., i] for i in range(4))
    d = np.minimum.reduce([
        _point_segment(ax, ay, cx, cy, dx, dy), _point_segment(bx, by, cx, cy, dx, dy),
        _point_segment(cx, cy, ax, ay, bx, by), _point_segment(dx, dy, ax, ay, bx, by)])

    def cross(ox, oy, ux, uy, vx, vy):
        return (ux - ox) * (vy - oy) - (uy - oy) * (vx - ox)

    d1, d2 = cross(cx, cy, dx, dy, ax, ay), cross(cx, cy, dx, dy, bx, by)
    d3, d4 = cross(ax, ay, bx, by, cx, cy), cross(ax, ay, bx, by, dx, dy)
    crossing = (d1 * d2 < 0) & (d3 * d4 < 0)
    return float(np.where(crossing, 0.0, d).min())


def gen_poses(k: int, skel: SkeletonSpec = COCO_SKELETON, cfg: RenderConfig = RenderConfig(),
              seed: int = 0, template: Sequence[tuple[float, float]] = COCO_TEMPLATE,
              max_rejections: int = 1000) -> list[GroundTruthPose]:
    """Place ``k`` scaled/translated template people with pairwise skeleton
    clearance of at least ``min_person_separation``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if len(template) != skel.num_joints:
        raise ValueError("template does not match the skeleton")
    rng = SplitMix64(seed)
    xs = [p[0] for p in template]
    ys = [p[1] for p in template]
    poses: list[GroundTruthPose] = []
    rejections = 0
    while len(poses) < k:
        lo, hi = cfg.scale_range
        scale = lo + (hi - lo) * rng.uniform()
        x_lo = cfg.margin - min(xs) * scale
        x_hi = cfg.width - 1 - cfg.margin - max(xs) * scale
        y_lo = cfg.margin - min(ys) * scale
        y_hi = cfg.height - 1 - cfg.margin - max(ys) * scale
        ux, uy = rng.uniform(), rng.uniform()
        if x_hi < x_lo or y_hi < y_lo:
            raise PlacementFailed(f"a person of scale {scale:.1f} does not fit in "
                                  f"{cfg.width}x{cfg.height}")
        cx, cy = x_lo + (x_hi - x_lo) * ux, y_lo + (y_hi - y_lo) * uy
        cand = GroundTruthPose(len(poses), tuple((cx + tx * scale, cy + ty * scale)
                                                 for tx, ty in template))
        if all(person_distance(cand, p, skel) >= cfg.min_person_separation for p in poses):
            poses.append(cand)
            continue
        rejections += 1
        if rejections >= max_rejections:
            raise PlacementFailed(f"placed {len(poses)} of {k} people after {rejections} rejections")
    return poses


def _window(cx, cy, radius, h, w):
    x0 = max(0, int(math.floor(cx - radius)))
    x1 = min(w, int(math.ceil(cx + radius)) + 1)
    y0 = max(0, int(math.floor(cy - radius)))
    y1 = min(h, int(math.ceil(cy + radius)) + 1)
    return x0, x1, y0, y1


def render(poses: Sequence[GroundTruthPose], skel: SkeletonSpec = COCO_SKELETON,
           cfg: RenderConfig = RenderConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(heatmaps[J,H,W], pafs[2L,H,W])`` as float32."""
    h, w = cfg.height, cfg.width
    heat = np.zeros((skel.num_joints, h, w), dtype=np.float64)
    radius = 6.0 * cfg.gaussian_sigma  # exp(-18) is below float32 resolution of 1.0
    for pose in poses:
        for j, (px, py) in enumerate(pose.joints):
            x0, x1, y0, y1 = _window(px, py, radius, h, w)
            if x0 >= x1 or y0 >= y1:
                continue
            gx = np.arange(x0, x1, dtype=np.float64) - px
            gy = np.arange(y0, y1, dtype=np.float64) - py
            g = np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2 * cfg.gaussian_sigma ** 2))
            np.maximum(heat[j, y0:y1, x0:x1], g, out=heat[j, y0:y1, x0:x1])

    paf = np.zeros((2 * skel.num_limbs, h, w), dtype=np.float64)
    for li, (ja, jb) in enumerate(skel.limbs):
        count = np.zeros((h, w), dtype=np.int32)
        for pose in poses:
            (ax, ay), (bx, by) = pose.joints[ja], pose.joints[jb]
            length = math.hypot(bx - ax, by - ay)
            if length < 1e-9:
                continue
            ux, uy = (bx - ax) / length, (by - ay) / length
            x0 = max(0, int(math.floor(min(ax, bx) - cfg.limb_width)))
            x1 = min(w, int(math.ceil(max(ax, bx) + cfg.limb_width)) + 1)
            y0 = max(0, int(math.floor(min(ay, by) - cfg.limb_width)))
            y1 = min(h, int(math.ceil(max(ay, by) + cfg.limb_width)) + 1)
            if x0 >= x1 or y0 >= y1:
                continue
            gx = np.arange(x0, x1, dtype=np.float64)[None, :] - ax
            gy = np.arange(y0, y1, dtype=np.float64)[:, None] - ay
            t = np.clip(gx * ux + gy * uy, 0.0, length)
            dist = np.hypot(gx - t * ux, gy - t * uy)
            inside = dist <= cfg.limb_width
            paf[2 * li, y0:y1, x0:x1] += np.where(inside, ux, 0.0)
            paf[2 * li + 1, y0:y1, x0:x1] += np.where(inside, uy, 0.0)
            count[y0:y1, x0:x1] += inside
        nz = count > 0
        paf[2 * li][nz] /= count[nz]
        paf[2 * li + 1][nz] /= count[nz]

    heat32 = heat.astype(np.float32)
    paf32 = paf.astype(np.float32)
    if cfg.noise_amplitude > 0:
        noise = uniform_noise(cfg.noise_seed, heat32.size + paf32.size, cfg.noise_amplitude)
        heat32 = np.clip(heat32 + noise[:heat32.size].reshape(heat32.shape), 0.0, 1.0)
        paf32 = paf32 + noise[heat32.size:].reshape(paf32.shape)
    return heat32, paf32


def scene_to_json(poses: Sequence[GroundTruthPose], skel: SkeletonSpec, cfg: RenderConfig,
                  seed: int) -> dict:
    return {"seed": seed, "skeleton": skel.to_json(), "config": cfg.to_json(),
            "persons": [p.to_json() for p in poses]}


def match_to_ground_truth(decoded, truth: Sequence[GroundTruthPose], tolerance: float = 1.5) -> dict:
    """One-to-one match decoded instances to ground truth by worst-joint error.

    A missing joint counts as an infinite error. ``exact`` holds when the
    counts agree and every matched pair has all joints within ``tolerance``.
    """
    from scipy.optimize import linear_sum_assignment

    n_dec, n_gt = len(decoded), len(truth)
    result = {"decoded": n_dec, "truth": n_gt, "count_ok": n_dec == n_gt, "max_error_px": None,
              "exact": False, "pairs": []}
    if n_dec == 0 or n_gt == 0:
        result["exact"] = n_dec == n_gt
        return result
    cost = np.full((n_dec, n_gt), np.inf)
    for i, inst in enumerate(decoded):
        for j, gt in enumerate(truth):
            errs = [math.inf if kp is None else math.hypot(kp.x - gx, kp.y - gy)
                    for kp, (gx, gy) in zip(inst.joints, gt.joints)]
            cost[i, j] = max(errs)
    rows, cols = linear_sum_assignment(np.where(np.isinf(cost), 1e9, cost))
    worst = float(cost[rows, cols].max())
    result["pairs"] = [[int(r), int(c)] for r, c in zip(rows, cols)]
    result["max_error_px"] = worst if math.isfinite(worst) else None
    result["exact"] = bool(result["count_ok"] and worst <= tolerance)
    return result
