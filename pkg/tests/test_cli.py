import json
import pathlib

import numpy as np
import pytest

from mvkp.cli import main
from mvkp.files import load_json
from mvkp.geometry import Pose
from mvkp.report import read_tsv

FIXTURES = pathlib.Path(__file__).parent / "fixtures"

MINIMAL = """
[simulator]
view_count = 2
instance_count = 1
keypoints = 32
noise_sigma = 0.0
rng_seed = 11
scenes = 2
"""

FOUR = """
[simulator]
view_count = 4
instance_count = 4
keypoints = 32
noise_sigma = 0.0
position_range = 90.0
rng_seed = 5
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def simulate(tmp_path, cfg_text, name="scene.json", *extra):
    cfg = write(tmp_path, "run.toml", cfg_text)
    out = str(tmp_path / name)
    assert main(["simulate", "--config", cfg, "--out", out, *extra]) == 0
    return out


def estimate(tmp_path, scene, name="results.json", *extra):
    out = str(tmp_path / name)
    assert main(["estimate", scene, "--out", out, *extra]) == 0
    return out


def ar_of(rows, metric):
    return {r["metric"]: r["AR"] for r in rows}[metric]


def test_minimal_round_trip(tmp_path, capsys):
    scene = simulate(tmp_path, MINIMAL)
    doc = load_json(scene)
    assert doc["schema"] == "mvkp.scene" and doc["seed"] == 11 and len(doc["scenes"]) == 2
    assert doc["units"] == {"length": "mm", "pixel": "px"}
    assert "seed=11" in capsys.readouterr().out
    res = load_json(estimate(tmp_path, scene))
    assert res["scene_config_hash"] == doc["config_hash"]
    for sc, truth in zip(res["scenes"], doc["scenes"]):
        (est,) = sc["estimates"]
        assert est["status"] == "ok"
        gt = Pose.from_dict(truth["truth"]["canonical_poses"][0])
        got = Pose.from_dict(est["pose"])
        assert np.abs(got.translation - gt.translation).max() < 1e-6
    timing = load_json(str(tmp_path / "results.json.timing.json"))
    assert timing["solver_seconds"] > 0


def test_reruns_are_byte_identical(tmp_path):
    a = simulate(tmp_path, MINIMAL, "a.json")
    b = simulate(tmp_path, MINIMAL, "b.json", "--jobs", "2")
    assert pathlib.Path(a).read_bytes() == pathlib.Path(b).read_bytes()
    ra = estimate(tmp_path, a, "ra.json")
    rb = estimate(tmp_path, a, "rb.json", "--jobs", "2")
    assert pathlib.Path(ra).read_bytes() == pathlib.Path(rb).read_bytes()


def test_seed_override(tmp_path):
    a = load_json(simulate(tmp_path, MINIMAL, "a.json", "--seed", "3"))
    assert a["seed"] == 3 and a["config"]["simulator"]["rng_seed"] == 3


def test_bad_view_count(tmp_path, capsys):
    cfg = write(tmp_path, "bad.toml", "[simulator]\nview_count = 1\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s.json")]) == 2
    assert "simulator.view_count" in capsys.readouterr().err


def test_bad_arguments_and_io(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["simulate"])
    assert info.value.code == 2
    assert main(["estimate", str(tmp_path / "missing.json"), "--out", str(tmp_path / "r.json")]) == 3


def _sparsify(scene_path, instance_ids):
    """Leave only two visible keypoints on the given instances in every view."""
    doc = load_json(scene_path)
    for sc in doc["scenes"]:
        for row in sc["observations"]:
            for det in row:
                if det["instance_id"] in instance_ids:
                    det["visibility"] = [1, 1] + [0] * (len(det["visibility"]) - 2)
    pathlib.Path(scene_path).write_text(json.dumps(doc))


def test_occluded_instance_fails_alone(tmp_path):
    scene = simulate(tmp_path, FOUR)
    _sparsify(scene, {2})
    res = load_json(estimate(tmp_path, scene))
    ests = res["scenes"][0]["estimates"]
    failed = [e for e in ests if e["status"] == "failed"]
    assert len(failed) == 1 and failed[0]["stage"] == "stage2"
    assert sum(e["status"] == "ok" for e in ests) == 3


def test_batch_without_any_pose(tmp_path):
    scene = simulate(tmp_path, FOUR)
    _sparsify(scene, {0, 1, 2, 3})
    assert main(["estimate", scene, "--out", str(tmp_path / "r.json")]) == 4


def test_perfect_results(tmp_path, capsys):
    scene = simulate(tmp_path, FOUR)
    res = estimate(tmp_path, scene)
    capsys.readouterr()
    assert main(["evaluate", res, scene, "--out", str(tmp_path / "rep")]) == 0
    rows = read_tsv(tmp_path / "rep" / "report.tsv")
    assert {r["metric"] for r in rows} == {"add", "5mm10deg", "2mm3deg"}
    assert all(r["AR"] == "100.00" for r in rows)
    out = capsys.readouterr().out
    assert out.startswith("# config_hash=") and "\n# seed=5/0\n" in out


def test_three_of_four(tmp_path):
    scene = simulate(tmp_path, FOUR)
    assert all(i["visibility_score"] > 0.75 for i in load_json(scene)["scenes"][0]["instances"])
    res = estimate(tmp_path, scene)
    doc = load_json(res)
    doc["scenes"][0]["estimates"][1]["pose"]["translation"][0] += 30.0
    pathlib.Path(res).write_text(json.dumps(doc))
    assert main(["evaluate", res, scene, "--metric", "5mm10deg", "--out", str(tmp_path / "rep")]) == 0
    (row,) = read_tsv(tmp_path / "rep" / "report.tsv")
    assert row["AR"] == "75.00" and row["valid_gt"] == "4" and row["passed"] == "3"


def test_schema_mismatch(tmp_path, capsys):
    scene = simulate(tmp_path, MINIMAL)
    res = estimate(tmp_path, scene)
    # results evaluated against a scene file they were not computed from
    other = simulate(tmp_path, MINIMAL.replace("rng_seed = 11", "rng_seed = 12"), "other.json")
    assert main(["evaluate", res, other]) == 5
    doc = load_json(res)
    doc["version"] = 99
    pathlib.Path(res).write_text(json.dumps(doc))
    assert main(["evaluate", res, scene]) == 5
    assert "version 99" in capsys.readouterr().err
    assert main(["estimate", res, "--out", str(tmp_path / "x.json")]) == 5


def test_sweep_columns_match_golden_files(tmp_path, capsys):
    cfg = write(tmp_path, "run.toml", MINIMAL.replace("noise_sigma = 0.0", "noise_sigma = 1.0"))
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", cfg, "--views", "2", "3", "--keypoints", "16", "32", "--ablation", "--out", str(out)]) == 0
    for name, golden in (("report.tsv", "report_columns.tsv"), ("series.tsv", "series_columns.tsv"), ("timing.tsv", "timing_columns.tsv")):
        lines = (out / name).read_text().splitlines()
        header = next(ln for ln in lines if not ln.startswith("#"))
        assert header + "\n" == (FIXTURES / golden).read_text()
    rows = read_tsv(out / "report.tsv")
    assert len(rows) == 2 * 2 * 2 * 3  # views x keypoints x refine x metrics
    series = read_tsv(out / "series.tsv")
    assert len(series) == 2 * 2 * 3
    for name in ("views.png", "keypoints.png", "runtime.png"):
        assert (out / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_is_byte_identical(tmp_path):
    cfg = write(tmp_path, "run.toml", MINIMAL)
    for d in ("a", "b"):
        assert main(["sweep", "--config", cfg, "--views", "2", "--keypoints", "16", "--out", str(tmp_path / d), "--jobs", "2" if d == "b" else "1"]) == 0
    for name in ("report.tsv", "series.tsv", "views.png", "keypoints.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_large_batch_aggregates(tmp_path, capsys):
    text = MINIMAL.replace("scenes = 2", "scenes = 500").replace("keypoints = 32", "keypoints = 16")
    text = text.replace("noise_sigma = 0.0", "noise_sigma = 1.0\noutlier_ratio = 0.1")
    scene = simulate(tmp_path, text)
    res = estimate(tmp_path, scene, "results.json", "--jobs", "2")
    assert len(load_json(res)["scenes"]) == 500
    capsys.readouterr()
    assert main(["evaluate", res, scene, "--metric", "add"]) == 0
    out = capsys.readouterr().out.splitlines()
    row = dict(zip(out[2].split("\t"), out[3].split("\t")))
    assert int(row["valid_gt"]) > 400 and float(row["AR"]) > 50
