"""``poseopt`` command line: JSON reports on stdout, a one-line summary on stderr.

Exit codes: 0 success, 1 usage error, 2 validation or data error,
3 unreachable speedup target. Errors are reported as JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Callable

from . import __version__
from . import cost_model, graph_ir, pruner, rewrite
from .errors import PoseOptError
from .tensor_io import sha256_file

TOOL = "poseopt"


class UsageError(Exception):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(text: str, n: int, what: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != n or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"{what} must look like {'x'.join(['N'] * n)}, got {text!r}")
    return dims


def _chw(text):
    return _dims(text, 3, "--input")


def _hw(text):
    return _dims(text, 2, "--size")


def _act_pair(text):
    parts = text.split(":")
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"expected FROM:TO, got {text!r}")
    return parts[0], parts[1]


def _threads() -> int:
    raw = os.environ.get("POSEOPT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = -1
    if n < 0:
        raise UsageError(f"POSEOPT_THREADS must be a nonnegative integer, got {raw!r}")
    return n


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


class Run:
    """Accumulates everything a command reports."""

    def __init__(self, command: str, inputs: list[str]):
        self.command = command
        self.config: dict = {}
        self.results: dict = {}
        self.files: list[dict] = []
        self.timings: dict[str, float] = {}
        self.requires_retraining = False
        self.summary = ""
        self._inputs = {Path(p).resolve() for p in inputs if p}

    @contextmanager
    def timed(self, stage: str):
        t0 = time.perf_counter()
        yield
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0

    def check_output(self, path) -> Path:
        path = Path(path)
        if path.resolve() in self._inputs:
            raise UsageError(f"refusing to overwrite input file {str(path)!r}")
        return path

    def wrote(self, path, digest: str | None = None) -> None:
        self.files.append({"path": str(path), "sha256": digest or sha256_file(path)})

    def write_json(self, path, doc) -> None:
        path = self.check_output(path)
        path.write_text(_dump(doc), encoding="utf-8")
        self.wrote(path)

    def report(self) -> dict:
        return {
            "tool": TOOL,
            "version": __version__,
            "command": self.command,
            "config": self.config,
            "results": self.results,
            "files": self.files,
            "requires_retraining": self.requires_retraining,
            "timings": self.timings,
        }


# ---------------------------------------------------------------------------
# shared loaders


def _load_graph(path, input_shape=None) -> graph_ir.Graph:
    g = graph_ir.load_graph(path)
    if input_shape is not None:
        g = g.with_input_shape(input_shape)
        graph_ir.infer_shapes(g)
    return g


def _load_calib(path) -> cost_model.LatencyParams:
    if path is None:
        return cost_model.DEFAULT_LATENCY_PARAMS
    return cost_model.load_latency_params(path)


def _totals(cost: cost_model.CostReport) -> dict:
    return {"params": cost.params, "macs": cost.macs, "flops": cost.flops}


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(args, run: Run) -> None:
    with run.timed("load"):
        g = _load_graph(args.graph, args.input)
        lp = _load_calib(args.calib)
    run.config.update(graph=args.graph, input=list(args.input) if args.input else None,
                      calibration=lp.to_json())
    with run.timed("analyze"):
        cost = cost_model.graph_cost(g)
        lat = cost_model.graph_latency(g, None, lp, cost)
        rf = cost_model.receptive_fields(g)
    run.results = {
        "graph": g.name,
        "input_shapes": {k: list(v) for k, v in g.input_shapes.items()},
        "output_shapes": {o: list(s) for o, s in zip(g.outputs, graph_ir.output_shapes(g))},
        "num_nodes": len(g.nodes),
        "conv_layers": graph_ir.conv_layer_count(g),
        "cost": cost.to_json(),
        "summary": {"params_M": cost.params / 1e6, "macs_G": cost.macs / 1e9,
                    "flops_G": cost.flops / 1e9},
        "latency": lat.to_json(),
        "receptive_field": {o: rf[o].to_json() for o in g.outputs},
    }
    run.summary = (f"{g.name}: {cost.params / 1e6:.2f}M params, {cost.macs / 1e9:.2f} GMACs, "
                   f"{cost.flops / 1e9:.2f} GFLOPs, predicted {lat.total * 1e3:.2f} ms")


def cmd_optimize(args, run: Run) -> None:
    lp = _load_calib(args.calib)
    run.config.update(source=args.graph, replace_large_kernels=args.replace_large_kernels,
                      dedilate=args.dedilate,
                      replace_act=":".join(args.replace_act) if args.replace_act else None,
                      depth_rescale=args.depth_rescale, calibration=lp.to_json())
    out_path = run.check_output(args.output)
    depth = None
    with run.timed("load"):
        if args.depth_rescale is not None:
            c, h, w = args.input or (3, 368, 368)
            spec = graph_ir.StageSpec.from_json(_read_json(args.graph))
            run.config.update(input=[c, h, w], rounding_multiple=args.rounding_multiple,
                              flops_tolerance=args.flops_tolerance)
            with run.timed("depth_rescale"):
                new_spec = rewrite.depth_rescale(spec, args.depth_rescale, args.rounding_multiple,
                                                 args.flops_tolerance, input_hw=(h, w))
            g = graph_ir.build_backbone(spec, c, (h, w))
            g_scaled = graph_ir.build_backbone(new_spec, c, (h, w))
            depth = {"spec_before": spec.to_json(), "spec_after": new_spec.to_json(),
                     "stage_body_macs_ratio": rewrite.stage_body_macs(new_spec, (h, w))
                     / rewrite.stage_body_macs(spec, (h, w))}
        else:
            g = _load_graph(args.graph, args.input)
            g_scaled = g
            run.config.update(input=list(args.input) if args.input else None)
    with run.timed("rewrite"):
        g2, log = rewrite.optimize(g_scaled, large_kernels=args.replace_large_kernels,
                                   dedilation=args.dedilate, activation_swap=args.replace_act)
    before, after = cost_model.graph_cost(g), cost_model.graph_cost(g2)
    shapes_kept = graph_ir.output_shapes(g) == graph_ir.output_shapes(g2)
    run.write_json(out_path, graph_ir.graph_to_dict(g2))
    run.requires_retraining = log.requires_retraining or (depth is not None and g_scaled != g)
    run.results = {
        "graph": g2.name,
        "rewrite_log": log.to_json(),
        "depth_rescale": depth,
        "cost_before": _totals(before),
        "cost_after": _totals(after),
        "latency_before": cost_model.graph_latency(g, None, lp, before).total,
        "latency_after": cost_model.graph_latency(g2, None, lp, after).total,
        "output_shapes_unchanged": shapes_kept,
        "violations": [v.message for v in graph_ir.validate(g2)],
    }
    run.summary = (f"{len(log.replaced)} node(s) rewritten, MACs {before.macs / 1e9:.3f}G -> "
                   f"{after.macs / 1e9:.3f}G")


def cmd_prune_plan(args, run: Run) -> None:
    if (args.target_speedup is None) == (args.max_distortion is None):
        raise UsageError("prune-plan: give exactly one of --target-speedup or --max-distortion")
    if args.max_distortion is not None and args.weights is None:
        raise UsageError("prune-plan: --max-distortion needs --weights")
    if args.masks_out and args.weights is None:
        raise UsageError("prune-plan: --masks-out needs --weights")
    from . import executor

    with run.timed("load"):
        g = _load_graph(args.graph, args.input)
        lp = _load_calib(args.calib)
        policy = pruner.load_policy(args.policy) if args.policy else pruner.SensitivityPolicy()
        scheme = pruner.Scheme.parse(args.scheme)
        weights = executor.WeightStore.load(args.weights) if args.weights else None
        if weights is not None:
            weights.check(g)
    run.config.update(graph=args.graph, calibration=lp.to_json(), policy=policy.to_json(),
                      target_speedup=args.target_speedup, max_distortion=args.max_distortion,
                      scheme=str(scheme), weights=args.weights, probes=args.probes, seed=args.seed)
    with run.timed("plan"):
        p = pruner.plan(g, lp, policy, target_speedup=args.target_speedup, weights=weights,
                        max_distortion=args.max_distortion, scheme=scheme, probes=args.probes,
                        seed=args.seed)
    if args.output:
        run.write_json(args.output, p.to_json())
    if args.masks_out:
        from .tensor_io import write_tensor

        out_dir = run.check_output(args.masks_out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for nid, keep in pruner.plan_masks(weights, p).items():
            path = out_dir / f"{nid}.mask.tnsr"
            run.wrote(path, write_tensor(path, keep.astype("float32")))
    run.requires_retraining = bool(p.decisions)
    run.results = {"plan": p.to_json(), "problems": pruner.check_plan(g, p, lp)}
    run.summary = (f"{len(p.decisions)} layer(s) pruned, predicted speedup "
                   f"{p.predicted_speedup:.3f}x")


def _decode_config(args):
    from .paf_decoder import DecodeConfig

    doc = DecodeConfig().to_json()
    if args.config:
        doc.update(_read_json(args.config))
    if args.peak_threshold is not None:
        doc["peak_threshold"] = args.peak_threshold
    if args.smoothing_sigma is not None:
        doc["heatmap_smoothing_sigma"] = args.smoothing_sigma
    return DecodeConfig.from_json(doc)


def _skeleton(path):
    from .paf_decoder import COCO_SKELETON, load_skeleton

    return load_skeleton(path) if path else COCO_SKELETON


def cmd_decode(args, run: Run) -> None:
    from .paf_decoder import decode, poses_to_json
    from .tensor_io import read_tensor

    with run.timed("load"):
        heat, paf = read_tensor(args.heat), read_tensor(args.paf)
        skel = _skeleton(args.skeleton)
        cfg = _decode_config(args)
    run.config.update(heat=args.heat, paf=args.paf, skeleton=skel.to_json(), decode=cfg.to_json())
    with run.timed("decode"):
        poses = decode(heat, paf, skel, cfg)
    doc = poses_to_json(poses)
    if args.output:
        run.write_json(args.output, doc)
    run.results = {"num_poses": len(poses), **doc}
    run.summary = f"decoded {len(poses)} pose(s)"


def _render_config(args, height, width):
    from .synth import RenderConfig

    doc = RenderConfig().to_json()
    if getattr(args, "render_config", None):
        doc.update(_read_json(args.render_config))
    doc.update(height=height, width=width)
    if args.noise is not None:
        doc["noise_amplitude"] = args.noise
    doc["noise_seed"] = args.seed if args.noise_seed is None else args.noise_seed
    return RenderConfig.from_json(doc)


def _synthesize(args, run: Run, skel, out_dir: Path | None):
    from . import synth
    from .tensor_io import write_tensor

    h, w = args.size
    cfg = _render_config(args, h, w)
    with run.timed("synth"):
        poses = synth.gen_poses(args.persons, skel, cfg, args.seed)
        heat, paf = synth.render(poses, skel, cfg)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        run.write_json(out_dir / "scene.json", synth.scene_to_json(poses, skel, cfg, args.seed))
        for name, arr in (("heat.tnsr", heat), ("paf.tnsr", paf)):
            path = out_dir / name
            run.wrote(path, write_tensor(path, arr))
    return cfg, poses, heat, paf


def cmd_synth(args, run: Run) -> None:
    skel = _skeleton(args.skeleton)
    out_dir = run.check_output(args.output)
    cfg, poses, heat, paf = _synthesize(args, run, skel, out_dir)
    run.config.update(persons=args.persons, seed=args.seed, skeleton=skel.to_json(),
                      render=cfg.to_json())
    run.results = {"persons": [p.to_json() for p in poses],
                   "heat_shape": list(heat.shape), "paf_shape": list(paf.shape)}
    run.summary = f"rendered {len(poses)} person(s) at {cfg.height}x{cfg.width}"


def cmd_e2e(args, run: Run) -> None:
    from .paf_decoder import decode, poses_to_json
    from .synth import match_to_ground_truth

    out_dir = run.check_output(args.output) if args.output else None
    with run.timed("load"):
        g = _load_graph(args.graph, args.input)
        lp = _load_calib(args.calib)
        policy = pruner.load_policy(args.policy) if args.policy else pruner.SensitivityPolicy()
        skel = _skeleton(args.skeleton)
        cfg = _decode_config(args)
    run.config.update(graph=args.graph, calibration=lp.to_json(), policy=policy.to_json(),
                      target_speedup=args.target_speedup,
                      replace_act=":".join(args.replace_act) if args.replace_act else None,
                      persons=args.persons, seed=args.seed, skeleton=skel.to_json(),
                      decode=cfg.to_json())

    with run.timed("analyze"):
        cost0 = cost_model.graph_cost(g)
        dense0 = cost_model.graph_latency(g, None, lp, cost0).total
    with run.timed("rewrite"):
        g1, log = rewrite.optimize(g, True, True, args.replace_act)
        cost1 = cost_model.graph_cost(g1)
        dense1 = cost_model.graph_latency(g1, None, lp, cost1).total
    with run.timed("plan"):
        p = pruner.plan(g1, lp, policy, target_speedup=args.target_speedup)
        recomputed = cost_model.graph_latency(g1, p, lp, cost1).total
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        run.write_json(out_dir / "rewritten.graph.json", graph_ir.graph_to_dict(g1))
        run.write_json(out_dir / "plan.json", p.to_json())

    render_cfg, truth, heat, paf = _synthesize(args, run, skel, out_dir)
    run.config["render"] = render_cfg.to_json()
    with run.timed("decode"):
        poses = decode(heat, paf, skel, cfg)
    match = match_to_ground_truth(poses, truth, args.tolerance)
    if out_dir is not None:
        run.write_json(out_dir / "poses.json", poses_to_json(poses))

    run.requires_retraining = log.requires_retraining or bool(p.decisions)
    run.results = {
        "analysis": {"graph": g.name, "cost": _totals(cost0), "dense_latency": dense0},
        "rewrite_log": log.to_json(),
        "rewritten_cost": _totals(cost1),
        "plan": p.to_json(),
        "plan_problems": pruner.check_plan(g1, p, lp, cost1),
        "latency": {
            "original_dense_total": dense0,
            "dense_total": dense1,
            "planned_total": recomputed,
            "predicted_speedup": dense1 / recomputed,
            "overall_speedup": dense0 / recomputed,
        },
        "decode": {**poses_to_json(poses), "ground_truth": [t.to_json() for t in truth],
                   "match": match},
    }
    run.summary = (f"speedup {dense1 / recomputed:.3f}x after rewrite ({dense0 / recomputed:.3f}x "
                   f"overall); decoded {len(poses)}/{len(truth)} people, exact={match['exact']}")


def cmd_calibrate(args, run: Run) -> None:
    doc = _read_json(args.measurements)
    run.config.update(measurements=args.measurements)
    lp = cost_model.fit_latency_params([tuple(m) for m in doc["dense"]],
                                       [tuple(m) for m in doc.get("sparse", [])],
                                       doc.get("penalties"))
    run.write_json(args.output, lp.to_json())
    run.results = {"calibration": lp.to_json()}
    run.summary = f"fitted time_per_mac={lp.time_per_mac:.3g}s per_node_overhead={lp.per_node_overhead:.3g}s"


def cmd_sensitivity(args, run: Run) -> None:
    from . import executor

    g = _load_graph(args.graph, args.input)
    w = executor.WeightStore.load(args.weights) if args.weights else executor.init_weights(g, args.seed)
    run.config.update(graph=args.graph, tags=args.tags, ratios=args.ratios, probes=args.probes,
                      seed=args.seed, weights=args.weights)
    curves = {}
    with run.timed("scan"):
        for tag in args.tags:
            curves[tag] = pruner.sensitivity_scan(g, w, tag, args.ratios, args.probes, args.seed)
    run.results = {"curves": curves}
    run.summary = f"scanned {len(args.tags)} block(s) at {len(args.ratios)} ratio(s)"


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--out", help="write the JSON report here instead of stdout")

    p = _Parser(prog=TOOL, description="Pose-network cost analysis, rewriting, pruning plans and "
                                       "PAF decoding.", allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn: Callable, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, allow_abbrev=False)
        sp.set_defaults(func=fn)
        return sp

    sp = add("analyze", cmd_analyze, "parameters, MACs, FLOPs, receptive field and latency")
    sp.add_argument("graph")
    sp.add_argument("--input", type=_chw, help="override the input shape, CxHxW")
    sp.add_argument("--calib", help="latency calibration JSON")

    sp = add("optimize", cmd_optimize, "apply rewrite passes")
    sp.add_argument("graph", help="graph JSON, or a StageSpec JSON with --depth-rescale")
    sp.add_argument("--replace-large-kernels", action="store_true")
    sp.add_argument("--dedilate", action="store_true")
    sp.add_argument("--replace-act", type=_act_pair, metavar="FROM:TO")
    sp.add_argument("--depth-rescale", type=float, metavar="M")
    sp.add_argument("--rounding-multiple", type=int, default=8)
    sp.add_argument("--flops-tolerance", type=float, default=0.15)
    sp.add_argument("--input", type=_chw, help="CxHxW; for --depth-rescale the backbone input")
    sp.add_argument("--calib")
    sp.add_argument("-o", "--output", required=True, help="rewritten graph JSON")

    sp = add("prune-plan", cmd_prune_plan, "latency-aware layer-wise pruning plan")
    sp.add_argument("graph")
    sp.add_argument("--calib", required=True)
    sp.add_argument("--policy")
    sp.add_argument("--target-speedup", type=float)
    sp.add_argument("--max-distortion", type=float)
    sp.add_argument("--weights", help="weight directory (tensor files plus manifest)")
    sp.add_argument("--scheme", default="unstructured", help="unstructured | channel | block:RxC")
    sp.add_argument("--probes", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--input", type=_chw)
    sp.add_argument("--masks-out", help="directory for keep-masks of the pruned layers")
    sp.add_argument("-o", "--output", help="plan JSON")

    def decode_flags(sp):
        sp.add_argument("--skeleton", help="skeleton JSON (default: COCO-18)")
        sp.add_argument("--config", help="decoder config JSON")
        sp.add_argument("--peak-threshold", type=float)
        sp.add_argument("--smoothing-sigma", type=float)

    sp = add("decode", cmd_decode, "group heatmap peaks into people")
    sp.add_argument("--heat", required=True)
    sp.add_argument("--paf", required=True)
    decode_flags(sp)
    sp.add_argument("-o", "--output", help="poses JSON")

    def synth_flags(sp, size_default=None):
        sp.add_argument("--persons", type=int, required=True)
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--size", type=_hw, default=size_default, required=size_default is None,
                        metavar="HxW")
        sp.add_argument("--noise", type=float, help="uniform noise amplitude")
        sp.add_argument("--noise-seed", type=int, help="defaults to --seed")
        sp.add_argument("--render-config", help="render config JSON")

    sp = add("synth", cmd_synth, "render a synthetic scene")
    synth_flags(sp)
    sp.add_argument("--skeleton")
    sp.add_argument("-o", "--output", required=True, help="output directory")

    sp = add("e2e", cmd_e2e, "analyze, rewrite, plan, synthesize and decode in one run")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--target-speedup", type=float, required=True)
    sp.add_argument("--policy")
    sp.add_argument("--input", type=_chw)
    sp.add_argument("--replace-act", type=_act_pair, default=("swish", "hardtanh"), metavar="FROM:TO")
    synth_flags(sp, size_default=(368, 368))
    decode_flags(sp)
    sp.add_argument("--tolerance", type=float, default=1.5, help="keypoint match tolerance, px")
    sp.add_argument("-o", "--output", help="directory for intermediate artifacts")

    sp = add("calibrate", cmd_calibrate, "fit latency constants from measured timings")
    sp.add_argument("measurements", help='JSON with "dense": [[macs, s], ...] and optional '
                                         '"sparse": [[macs, ratio, s], ...], "penalties"')
    sp.add_argument("-o", "--output", required=True)

    sp = add("sensitivity", cmd_sensitivity, "output distortion versus pruning ratio per block")
    sp.add_argument("graph")
    sp.add_argument("--tags", nargs="+", default=list(graph_ir.BLOCK_TAGS[:4]))
    sp.add_argument("--ratios", type=float, nargs="+", default=list(pruner.DEFAULT_CANDIDATES))
    sp.add_argument("--probes", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--weights")
    sp.add_argument("--input", type=_chw)
    return p


_INPUT_ARGS = ("graph", "calib", "policy", "heat", "paf", "skeleton", "config", "render_config",
               "measurements")


def run_command(argv, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        run = Run(args.command, [getattr(args, a, None) for a in _INPUT_ARGS])
        run.config["threads"] = _threads()
        t0 = time.perf_counter()
        args.func(args, run)
        run.timings["total"] = time.perf_counter() - t0
        text = _dump(run.report())
        if args.out:
            run.check_output(args.out).write_text(text, encoding="utf-8")
        else:
            stdout.write(text)
        if run.summary:
            stderr.write(run.summary + "\n")
        return 0
    except UsageError as exc:
        stderr.write(_dump({"error": "UsageError", "message": str(exc)}))
        return 1
    except PoseOptError as exc:
        stderr.write(_dump(exc.to_json()))
        return exc.exit_code
    except (ValueError, KeyError, TypeError, OSError) as exc:
        stderr.write(_dump({"error": type(exc).__name__, "message": str(exc)}))
        return 2


def main(argv=None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
