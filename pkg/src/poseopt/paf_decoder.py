"""Part-affinity-field post-processing: heatmaps + PAFs -> people.

Pipeline: per-joint peak extraction, line-integral scoring of candidate
limbs, greedy bipartite matching per limb type, then assembly of matched
limbs into person instances. Coordinates are heatmap pixels, x = column,
y = row.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import DegenerateSegment, ShapeMismatch


@dataclass(frozen=True)
class SkeletonSpec:
    joint_names: tuple[str, ...]
    limbs: tuple[tuple[int, int], ...]
    name: str = "skeleton"

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "limbs", tuple((int(a), int(b)) for a, b in self.limbs))
        self.check()

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_limbs(self) -> int:
        return len(self.limbs)

    def paf_channels(self, limb: int) -> tuple[int, int]:
        return 2 * limb, 2 * limb + 1

    def check(self) -> None:
        j = self.num_joints
        for a, b in self.limbs:
            if not (0 <= a < j and 0 <= b < j) or a == b:
                raise ValueError(f"bad limb ({a}, {b}) for {j} joints")
        if len(set(self.limbs)) != len(self.limbs):
            raise ValueError("duplicate limbs")

    def to_json(self) -> dict:
        return {"name": self.name, "joint_names": list(self.joint_names),
                "limbs": [list(l) for l in self.limbs]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "SkeletonSpec":
        return cls(tuple(doc["joint_names"]), tuple(tuple(l) for l in doc["limbs"]),
                   doc.get("name", "skeleton"))


def load_skeleton(path) -> SkeletonSpec:
    with open(path, encoding="utf-8") as fh:
        return SkeletonSpec.from_json(json.load(fh))


# OpenPose COCO-18 ordering; the last two limbs (shoulder-ear) are redundant
# edges that close cycles through the head.
COCO_SKELETON = SkeletonSpec(
    ("nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
     "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear",
     "l_ear"),
    ((1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10), (1, 11), (11, 12),
     (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17), (2, 16), (5, 17)),
    "coco18",
)


@dataclass(frozen=True)
class DecodeConfig:
    peak_threshold: float = 0.1
    num_integral_samples: int = 10
    sample_alignment_threshold: float = 0.05
    min_aligned_fraction: float = 0.8
    use_distance_prior: bool = True
    min_parts: int = 4
    min_avg_score: float = 0.4
    subpixel: bool = True
    heatmap_smoothing_sigma: float = 0.0  # >0: Gaussian pre-filter before peak search

    def __post_init__(self):
        for name in ("peak_threshold", "sample_alignment_threshold", "min_aligned_fraction",
                     "min_avg_score"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.num_integral_samples < 2:
            raise ValueError("num_integral_samples must be >= 2")
        if self.heatmap_smoothing_sigma < 0:
            raise ValueError("heatmap_smoothing_sigma must be >= 0")

    @classmethod
    def from_json(cls, doc: Mapping) -> "DecodeConfig":
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Keypoint:
    joint_id: int
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class Connection:
    limb_id: int
    keypoint_a: int  # index into the joint_a candidate list
    keypoint_b: int
    score: float  # alignment plus distance prior, when enabled


@dataclass
class PoseInstance:
    joints: list[Keypoint | None]
    total_score: float = 0.0

    @property
    def num_parts(self) -> int:
        return sum(k is not None for k in self.joints)

    def to_json(self) -> dict:
        return {"joints": [None if k is None else {"id": k.joint_id, "x": k.x, "y": k.y,
                                                   "score": k.score} for k in self.joints],
                "score": self.total_score}


# ---------------------------------------------------------------------------
# peaks

_FOUR = ndimage.generate_binary_structure(2, 1)


def _refine(line: np.ndarray, i: int) -> float:
    if i <= 0 or i >= line.size - 1:
        return 0.0
    left, mid, right = float(line[i - 1]), float(line[i]), float(line[i + 1])
    curvature = left - 2 * mid + right
    if curvature >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


def peak_candidates(hm: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels above ``threshold`` and >= each 4-neighbour (stacked over axis 0)."""
    pad = np.pad(hm, [(0, 0)] * (hm.ndim - 2) + [(1, 1), (1, 1)], constant_values=-np.inf)
    c = pad[..., 1:-1, 1:-1]
    return ((c > threshold) & (c >= pad[..., :-2, 1:-1]) & (c >= pad[..., 2:, 1:-1])
            & (c >= pad[..., 1:-1, :-2]) & (c >= pad[..., 1:-1, 2:]))


def _plateau_representatives(candidate: np.ndarray) -> np.ndarray:
    """Flat indices of the first (row-major) pixel of each candidate plateau."""
    flat = np.flatnonzero(candidate)
    adjacent = (candidate[1:, :] & candidate[:-1, :]).any() or (candidate[:, 1:] & candidate[:, :-1]).any()
    if not adjacent:
        return flat
    # adjacent candidates are necessarily equal: keep one pixel per plateau
    labels, _ = ndimage.label(candidate, structure=_FOUR)
    _, first = np.unique(labels.ravel()[flat], return_index=True)
    return np.sort(flat[first])


def _keypoints(hm: np.ndarray, candidate: np.ndarray, joint_id: int, cfg: DecodeConfig) -> list[Keypoint]:
    peaks = []
    w = hm.shape[1]
    for idx in _plateau_representatives(candidate):
        y, x = divmod(int(idx), w)
        dx = dy = 0.0
        if cfg.subpixel:
            dx = _refine(hm[y], x)
            dy = _refine(hm[:, x], y)
        peaks.append(Keypoint(joint_id, x + dx, y + dy, float(hm[y, x])))
    return peaks


def extract_peaks_2d(hm: np.ndarray, joint_id: int, cfg: DecodeConfig) -> list[Keypoint]:
    hm = np.asarray(hm, dtype=np.float32)
    return _keypoints(hm, peak_candidates(hm, cfg.peak_threshold), joint_id, cfg)


def extract_peaks(heatmaps: np.ndarray, cfg: DecodeConfig = DecodeConfig()) -> list[list[Keypoint]]:
    heatmaps = np.asarray(heatmaps, dtype=np.float32)
    if cfg.heatmap_smoothing_sigma > 0:
        heatmaps = ndimage.gaussian_filter(heatmaps, sigma=(0, cfg.heatmap_smoothing_sigma,
                                                            cfg.heatmap_smoothing_sigma),
                                           mode="constant", truncate=3.0)
    candidates = peak_candidates(heatmaps, cfg.peak_threshold)
    return [_keypoints(heatmaps[j], candidates[j], j, cfg) for j in range(heatmaps.shape[0])]


# ---------------------------------------------------------------------------
# limb scoring and matching


def bilinear(field2d: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = field2d.shape
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    f = field2d
    top = f[y0, x0].astype(np.float64) * (1 - fx) + f[y0, x1].astype(np.float64) * fx
    bot = f[y1, x0].astype(np.float64) * (1 - fx) + f[y1, x1].astype(np.float64) * fx
    return top * (1 - fy) + bot * fy


def _alignment(paf_x, paf_y, ax, ay, bx, by, samples: int):
    """Per-sample dot products for a batch of segments; returns (dots, lengths)."""
    dx, dy = bx - ax, by - ay
    norm = np.hypot(dx, dy)
    t = np.linspace(0.0, 1.0, samples)
    xs = ax[:, None] + t[None, :] * dx[:, None]
    ys = ay[:, None] + t[None, :] * dy[:, None]
    ux, uy = (dx / norm)[:, None], (dy / norm)[:, None]
    return bilinear(paf_x, xs, ys) * ux + bilinear(paf_y, xs, ys) * uy, norm


def _judge(dots: np.ndarray, norm: np.ndarray, height: int, cfg: DecodeConfig):
    score = dots.mean(axis=1)
    prior = np.minimum(0.5 * height / norm - 1.0, 0.0) if cfg.use_distance_prior else np.zeros_like(norm)
    aligned = np.count_nonzero(dots > cfg.sample_alignment_threshold, axis=1) / dots.shape[1]
    return score, prior, (aligned >= cfg.min_aligned_fraction) & (score + prior > 0)


def connection_score(paf_x: np.ndarray, paf_y: np.ndarray, a: Keypoint, b: Keypoint,
                     cfg: DecodeConfig = DecodeConfig()) -> tuple[float, bool]:
    """Mean PAF alignment along a->b, and whether the pair passes the tests.

    The returned score is the raw mean alignment; the distance prior only
    enters the validity test.
    """
    if np.hypot(b.x - a.x, b.y - a.y) < 1e-6:
        raise DegenerateSegment(f"keypoints at ({a.x}, {a.y}) coincide")
    dots, norm = _alignment(paf_x, paf_y, np.array([a.x]), np.array([a.y]), np.array([b.x]),
                            np.array([b.y]), cfg.num_integral_samples)
    score, _, valid = _judge(dots, norm, paf_x.shape[0], cfg)
    return float(score[0]), bool(valid[0])


def score_limb(paf_x, paf_y, cand_a: Sequence[Keypoint], cand_b: Sequence[Keypoint], limb_id: int,
               cfg: DecodeConfig) -> list[Connection]:
    """All valid connections for one limb type, scored with the distance prior."""
    if not cand_a or not cand_b:
        return []
    ia, ib = np.meshgrid(np.arange(len(cand_a)), np.arange(len(cand_b)), indexing="ij")
    ia, ib = ia.ravel(), ib.ravel()
    pa = np.array([(k.x, k.y) for k in cand_a])[ia]
    pb = np.array([(k.x, k.y) for k in cand_b])[ib]
    distinct = np.hypot(pb[:, 0] - pa[:, 0], pb[:, 1] - pa[:, 1]) >= 1e-6
    ia, ib, pa, pb = ia[distinct], ib[distinct], pa[distinct], pb[distinct]
    if ia.size == 0:
        return []
    dots, norm = _alignment(paf_x, paf_y, pa[:, 0], pa[:, 1], pb[:, 0], pb[:, 1],
                            cfg.num_integral_samples)
    score, prior, valid = _judge(dots, norm, paf_x.shape[0], cfg)
    return [Connection(limb_id, int(i), int(j), float(s + p))
            for i, j, s, p, v in zip(ia, ib, score, prior, valid) if v]


def match_limb(connections: Sequence[Connection]) -> list[Connection]:
    """Greedy matching: best score first, ties by (a, b); each endpoint used once."""
    used_a, used_b = set(), set()
    accepted = []
    for c in sorted(connections, key=lambda c: (-c.score, c.keypoint_a, c.keypoint_b)):
        if c.keypoint_a in used_a or c.keypoint_b in used_b:
            continue
        used_a.add(c.keypoint_a)
        used_b.add(c.keypoint_b)
        accepted.append(c)
    return accepted


# ---------------------------------------------------------------------------
# assembly


@dataclass
class _Subset:
    slots: list[int]  # candidate index per joint, -1 when absent
    score: float = 0.0
    connections: list[Connection] = field(default_factory=list)


def assemble(peaks: Sequence[Sequence[Keypoint]], matched: Sequence[Sequence[Connection]],
             skel: SkeletonSpec) -> list[_Subset]:
    """Group matched limbs into subsets, in ``skel.limbs`` order.

    A connection extends the subset holding one endpoint when the other
    joint slot is free, starts a subset when neither endpoint is held and
    merges two subsets that hold one endpoint each if their joints are
    disjoint. Anything else (both endpoints already together, or a slot
    taken by a different candidate) leaves the subsets unchanged.
    """
    subsets: list[_Subset] = []
    owner: dict[tuple[int, int], int] = {}  # (joint, candidate) -> subset index
    for limb_id, conns in enumerate(matched):
        ja, jb = skel.limbs[limb_id]
        for c in conns:
            sa = owner.get((ja, c.keypoint_a))
            sb = owner.get((jb, c.keypoint_b))
            ka, kb = peaks[ja][c.keypoint_a], peaks[jb][c.keypoint_b]
            if sa is None and sb is None:
                slots = [-1] * skel.num_joints
                slots[ja], slots[jb] = c.keypoint_a, c.keypoint_b
                subsets.append(_Subset(slots, ka.score + kb.score + c.score, [c]))
                owner[(ja, c.keypoint_a)] = owner[(jb, c.keypoint_b)] = len(subsets) - 1
            elif sa is not None and sb is None:
                s = subsets[sa]
                if s.slots[jb] == -1:
                    s.slots[jb] = c.keypoint_b
                    s.score += kb.score + c.score
                    s.connections.append(c)
                    owner[(jb, c.keypoint_b)] = sa
            elif sb is not None and sa is None:
                s = subsets[sb]
                if s.slots[ja] == -1:
                    s.slots[ja] = c.keypoint_a
                    s.score += ka.score + c.score
                    s.connections.append(c)
                    owner[(ja, c.keypoint_a)] = sb
            elif sa != sb:
                s1, s2 = subsets[sa], subsets[sb]
                if all(x == -1 or y == -1 for x, y in zip(s1.slots, s2.slots)):
                    s1.slots = [x if x != -1 else y for x, y in zip(s1.slots, s2.slots)]
                    s1.score += s2.score + c.score
                    s1.connections.extend(s2.connections + [c])
                    for j, k in enumerate(s2.slots):
                        if k != -1:
                            owner[(j, k)] = sa
                    s2.slots = [-1] * skel.num_joints
                    s2.score = 0.0
                    s2.connections = []
    return [s for s in subsets if any(k != -1 for k in s.slots)]


def decode(heatmaps: np.ndarray, pafs: np.ndarray, skel: SkeletonSpec = COCO_SKELETON,
           cfg: DecodeConfig = DecodeConfig(), keep_dropped: bool = False):
    """Decode people from ``heatmaps[J,H,W]`` and ``pafs[2L,H,W]``.

    Extra heatmap channels beyond J (e.g. a background map) are ignored.
    With ``keep_dropped`` the filtered-out instances are returned as well.
    """
    heatmaps = np.asarray(heatmaps)
    pafs = np.asarray(pafs)
    if heatmaps.ndim != 3 or pafs.ndim != 3:
        raise ShapeMismatch("heatmaps and pafs must be 3-D [C,H,W]")
    if heatmaps.shape[0] < skel.num_joints:
        raise ShapeMismatch(f"{heatmaps.shape[0]} heatmap channels for {skel.num_joints} joints")
    if pafs.shape[0] != 2 * skel.num_limbs:
        raise ShapeMismatch(f"{pafs.shape[0]} PAF channels for {skel.num_limbs} limbs")
    if heatmaps.shape[1:] != pafs.shape[1:]:
        raise ShapeMismatch("heatmap and PAF spatial sizes differ")
    peaks = extract_peaks(heatmaps[:skel.num_joints], cfg)
    matched = []
    for limb_id, (ja, jb) in enumerate(skel.limbs):
        cx, cy = skel.paf_channels(limb_id)
        conns = score_limb(pafs[cx], pafs[cy], peaks[ja], peaks[jb], limb_id, cfg)
        matched.append(match_limb(conns))
    kept, dropped = [], []
    for s in assemble(peaks, matched, skel):
        inst = PoseInstance([peaks[j][k] if k != -1 else None for j, k in enumerate(s.slots)], s.score)
        ok = inst.num_parts >= cfg.min_parts and inst.total_score / inst.num_parts >= cfg.min_avg_score
        (kept if ok else dropped).append(inst)
    if keep_dropped:
        return kept, dropped
    return kept


def poses_to_json(poses: Sequence[PoseInstance]) -> dict:
    return {"poses": [p.to_json() for p in poses]}
