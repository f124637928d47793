import io
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import FIXTURES, ROOT
from poseopt.cli import run_command
from poseopt.tensor_io import sha256_file, write_tensor

CALIB = str(FIXTURES / "default_calib.json")
LWOP = str(FIXTURES / "lwop.graph.json")


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run_command([str(a) for a in argv], out, err)
    report = json.loads(out.getvalue()) if out.getvalue() else None
    return code, report, err.getvalue()


def strip_timings(report):
    assert set(report["timings"]) >= {"total"}
    return {k: v for k, v in report.items() if k != "timings"}


def test_analyze_lwop():
    code, rep, err = cli("analyze", LWOP, "--input", "3x368x368")
    assert code == 0
    totals = rep["results"]["cost"]["totals"]
    assert totals["params"] == pytest.approx(4.1e6, rel=0.15)
    assert rep["tool"] == "poseopt" and rep["version"]
    assert rep["files"] == [] and rep["requires_retraining"] is False
    assert "params" in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "poseopt", "analyze", LWOP], capture_output=True,
                          text=True, cwd=tmp_path)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["command"] == "analyze"


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["analyze"],
    ["analyze", LWOP, "--input", "3x368"],
    ["prune-plan", LWOP, "--calib", CALIB],
    ["optimize", LWOP, "--replace-act", "swish"],
])
def test_usage_errors(argv):
    code, rep, err = cli(*argv)
    assert code == 1 and rep is None
    assert json.loads(err)["error"] == "UsageError"


def test_decode_mismatched_pafs(tmp_path):
    write_tensor(tmp_path / "h.tnsr", np.zeros((19, 16, 16)))
    write_tensor(tmp_path / "p.tnsr", np.zeros((36, 16, 16)))
    code, rep, err = cli("decode", "--heat", tmp_path / "h.tnsr", "--paf", tmp_path / "p.tnsr",
                         "--skeleton", FIXTURES / "coco18.skeleton.json")
    assert code == 2 and rep is None
    assert json.loads(err)["error"] == "ShapeMismatch"


@pytest.mark.parametrize("argv, kind", [
    (["analyze", "missing.json"], "FileNotFoundError"),
    (["analyze", FIXTURES / "default_calib.json"], "SchemaError"),
    (["analyze", LWOP, "--calib", LWOP], "ValueError"),
])
def test_data_errors(argv, kind):
    code, _, err = cli(*argv)
    assert code == 2 and json.loads(err)["error"] == kind


def test_unreachable_target():
    code, rep, err = cli("prune-plan", LWOP, "--calib", CALIB, "--target-speedup", "50")
    assert code == 3 and rep is None
    doc = json.loads(err)
    assert doc["error"] == "TargetUnreachable" and doc["best_achievable_speedup"] > 1


def test_optimize_writes_graph(tmp_path):
    out = tmp_path / "vgg.json"
    code, rep, _ = cli("optimize", FIXTURES / "openpose_vgg.graph.json", "--replace-large-kernels",
                       "--dedilate", "-o", out)
    assert code == 0
    assert rep["files"] == [{"path": str(out), "sha256": sha256_file(out)}]
    assert rep["requires_retraining"] is True
    assert rep["results"]["output_shapes_unchanged"] and rep["results"]["violations"] == []
    assert len(rep["results"]["rewrite_log"]["entries"]) == 50


def test_optimize_refuses_to_overwrite_input(tmp_path):
    src = tmp_path / "g.json"
    src.write_bytes((FIXTURES / "toy.graph.json").read_bytes())
    before = src.read_bytes()
    code, _, _ = cli("optimize", src, "--dedilate", "-o", src)
    assert code == 1 and src.read_bytes() == before


def test_depth_rescale_command(tmp_path):
    code, rep, _ = cli("optimize", FIXTURES / "resnet_like.stagespec.json", "--depth-rescale", "2",
                       "--input", "3x64x64", "-o", tmp_path / "deep.json")
    assert code == 0
    d = rep["results"]["depth_rescale"]
    assert [s["num_blocks"] for s in d["spec_after"]["stages"]] == [4, 6, 6]
    assert abs(d["stage_body_macs_ratio"] - 1) <= 0.15
    assert rep["requires_retraining"]


def test_prune_plan_with_weights_and_masks(tmp_path):
    from poseopt import zoo
    from poseopt.executor import init_weights

    g = zoo.toy_pose_net()
    init_weights(g, 0).save(tmp_path / "w")
    code, rep, _ = cli("prune-plan", FIXTURES / "toy.graph.json", "--calib", CALIB, "--weights",
                       tmp_path / "w", "--max-distortion", "0.5", "--scheme", "channel",
                       "--masks-out", tmp_path / "masks", "-o", tmp_path / "plan.json")
    assert code == 0
    paths = [f["path"] for f in rep["files"]]
    assert str(tmp_path / "plan.json") in paths
    assert len(paths) == 1 + len(rep["results"]["plan"]["decisions"])
    assert rep["results"]["problems"] == []


def test_synth_then_decode(tmp_path):
    code, rep, _ = cli("synth", "--persons", "3", "--seed", "7", "--size", "368x368", "-o", tmp_path / "s")
    assert code == 0
    names = sorted(f["path"].rsplit("/", 1)[1] for f in rep["files"])
    assert names == ["heat.tnsr", "paf.tnsr", "scene.json"]
    code, dec, _ = cli("decode", "--heat", tmp_path / "s/heat.tnsr", "--paf", tmp_path / "s/paf.tnsr",
                       "-o", tmp_path / "poses.json")
    assert code == 0 and dec["results"]["num_poses"] == 3


def test_config_precedence(tmp_path):
    cfg = tmp_path / "dec.json"
    cfg.write_text(json.dumps({"peak_threshold": 0.3, "min_parts": 5}))
    s = FIXTURES / "scenes" / "k1_seed0"
    code, rep, _ = cli("decode", "--heat", s / "heat.tnsr", "--paf", s / "paf.tnsr", "--config", cfg,
                       "--peak-threshold", "0.2")
    assert code == 0
    assert rep["config"]["decode"]["peak_threshold"] == 0.2
    assert rep["config"]["decode"]["min_parts"] == 5
    assert rep["config"]["decode"]["num_integral_samples"] == 10


def test_threads_echo_and_validation(monkeypatch):
    monkeypatch.setenv("POSEOPT_THREADS", "4")
    assert cli("analyze", LWOP)[1]["config"]["threads"] == 4
    monkeypatch.setenv("POSEOPT_THREADS", "-2")
    assert cli("analyze", LWOP)[0] == 1


def test_e2e(tmp_path):
    code, rep, _ = cli("e2e", "--graph", LWOP, "--calib", CALIB, "--target-speedup", "1.3",
                       "--persons", "3", "--seed", "2", "-o", tmp_path / "run")
    assert code == 0
    r = rep["results"]
    assert r["rewrite_log"]["entries"] and r["plan"]["decisions"]
    assert r["decode"]["match"]["exact"]
    assert r["latency"]["predicted_speedup"] >= 1.3
    assert r["plan_problems"] == []
    for f in rep["files"]:
        assert sha256_file(f["path"]) == f["sha256"]


def test_reports_are_reproducible(tmp_path):
    argv = ["e2e", "--graph", LWOP, "--calib", CALIB, "--target-speedup", "1.3", "--persons", "2",
            "--seed", "5", "--size", "200x200"]
    a = cli(*argv, "-o", tmp_path / "a")[1]
    b = cli(*argv, "-o", tmp_path / "a")[1]
    assert strip_timings(a) == strip_timings(b)


def test_report_to_file(tmp_path):
    out = tmp_path / "r.json"
    code, rep, _ = cli("analyze", LWOP, "--out", out)
    assert code == 0 and rep is None
    assert json.loads(out.read_text())["command"] == "analyze"


def test_calibrate(tmp_path):
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"dense": [[1e6, 3e-5], [1e7, 1.2e-4]], "sparse": []}))
    code, rep, _ = cli("calibrate", m, "-o", tmp_path / "c.json")
    assert code == 0
    assert rep["results"]["calibration"]["time_per_mac"] == pytest.approx(1e-11)
    code, _, _ = cli("analyze", LWOP, "--calib", tmp_path / "c.json")
    assert code == 0


def test_sensitivity_command():
    code, rep, _ = cli("sensitivity", FIXTURES / "toy.graph.json", "--tags", "Backbone", "PafBranch",
                       "--ratios", "0.5", "0.9", "--probes", "1")
    assert code == 0
    assert set(rep["results"]["curves"]) == {"Backbone", "PafBranch"}


@pytest.mark.parametrize("name", ["analyze_toy", "prune_plan_lwop", "decode_k3"])
def test_golden_reports(name, monkeypatch):
    sys.path.insert(0, str(ROOT / "scripts"))
    try:
        from make_fixtures import GOLDEN, golden_report
    finally:
        sys.path.pop(0)
    monkeypatch.delenv("POSEOPT_THREADS", raising=False)
    expected = json.loads((FIXTURES / "golden" / f"{name}.json").read_text())
    assert golden_report(GOLDEN[name]) == expected


def test_fixtures_up_to_date():
    proc = subprocess.run([sys.executable, str(ROOT / "scripts" / "make_fixtures.py"), "--check"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
