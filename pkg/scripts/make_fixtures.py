"""Regenerate everything under fixtures/ from the builders in poseopt.

    python3 scripts/make_fixtures.py [--check]

With ``--check`` nothing is written; the script exits 1 if any fixture
differs from what the builders produce now.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import os
import sys
from pathlib import Path

from poseopt import cost_model, pruner, synth, zoo
from poseopt.cli import run_command
from poseopt.graph_ir import serialize_graph
from poseopt.paf_decoder import COCO_SKELETON
from poseopt.tensor_io import encode_tensor

ROOT = Path(__file__).resolve().parent.parent / "fixtures"

# (persons, seed, noise) for the golden scenes; small frames keep the files light
SCENES = ((1, 0, 0.0), (3, 7, 0.0), (2, 11, 0.05))
SCENE_SIZE = 96
SCENE_SCALE = (24.0, 36.0)


def _json(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def fixtures() -> dict[str, bytes]:
    out = {
        "lwop.graph.json": serialize_graph(zoo.lightweight_openpose()).encode(),
        "openpose_vgg.graph.json": serialize_graph(zoo.openpose_vgg()).encode(),
        "toy.graph.json": serialize_graph(zoo.toy_pose_net()).encode(),
        "coco18.skeleton.json": _json(COCO_SKELETON.to_json()),
        "default_calib.json": _json(cost_model.DEFAULT_LATENCY_PARAMS.to_json()),
        "default_policy.json": _json(pruner.SensitivityPolicy().to_json()),
        "resnet_like.stagespec.json": _json({"stages": [
            {"num_blocks": 2, "width": 64, "block_kind": "bottleneck", "stride_first": 1},
            {"num_blocks": 3, "width": 128, "block_kind": "bottleneck", "stride_first": 2},
            {"num_blocks": 3, "width": 256, "block_kind": "plain3x3", "stride_first": 2}]}),
    }
    sums = {}
    for k, seed, noise in SCENES:
        cfg = synth.RenderConfig(SCENE_SIZE, SCENE_SIZE, noise_amplitude=noise, noise_seed=seed,
                                 min_person_separation=12.0, scale_range=SCENE_SCALE)
        poses = synth.gen_poses(k, COCO_SKELETON, cfg, seed)
        heat, paf = synth.render(poses, COCO_SKELETON, cfg)
        name = f"scenes/k{k}_seed{seed}" + (f"_noise{noise:g}" if noise else "")
        files = {f"{name}/scene.json": _json(synth.scene_to_json(poses, COCO_SKELETON, cfg, seed)),
                 f"{name}/heat.tnsr": encode_tensor(heat),
                 f"{name}/paf.tnsr": encode_tensor(paf)}
        out.update(files)
        sums.update({p: hashlib.sha256(b).hexdigest() for p, b in files.items()})
    out["scenes/SHA256SUMS.json"] = _json(sums)
    return out


# CLI invocations whose reports (timings removed) are pinned under golden/;
# paths are relative to the repository root
GOLDEN = {
    "analyze_toy": ["analyze", "fixtures/toy.graph.json", "--calib", "fixtures/default_calib.json"],
    "prune_plan_lwop": ["prune-plan", "fixtures/lwop.graph.json", "--calib",
                        "fixtures/default_calib.json", "--target-speedup", "1.3"],
    "decode_k3": ["decode", "--heat", "fixtures/scenes/k3_seed7/heat.tnsr",
                  "--paf", "fixtures/scenes/k3_seed7/paf.tnsr",
                  "--skeleton", "fixtures/coco18.skeleton.json"],
}


def golden_report(argv) -> dict:
    cwd = os.getcwd()
    os.chdir(ROOT.parent)
    try:
        buf, err = io.StringIO(), io.StringIO()
        code = run_command(argv, buf, err)
    finally:
        os.chdir(cwd)
    if code != 0:
        raise RuntimeError(f"{argv}: exit {code}: {err.getvalue()}")
    doc = json.loads(buf.getvalue())
    doc.pop("timings")
    return doc


def goldens() -> dict[str, bytes]:
    return {f"golden/{name}.json": _json(golden_report(argv)) for name, argv in GOLDEN.items()}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    stale = []
    files = fixtures()
    if not args.check:
        # golden reports read the fixtures, so write those first
        for rel, blob in files.items():
            (ROOT / rel).parent.mkdir(parents=True, exist_ok=True)
            (ROOT / rel).write_bytes(blob)
    files.update(goldens())
    for rel, blob in files.items():
        path = ROOT / rel
        if args.check:
            if not path.exists() or path.read_bytes() != blob:
                stale.append(rel)
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    if stale:
        print("stale fixtures: " + ", ".join(stale), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
