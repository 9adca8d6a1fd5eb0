"""Command-line entry point.

    mvkp simulate --config run.toml --out scene.json
    mvkp estimate scene.json --out results.json
    mvkp evaluate results.json scene.json --metric 5mm10deg --out report/
    mvkp sweep --config run.toml --views 2 4 8 --keypoints 32 256 --out sweep/

Exit status: 0 ok, 2 bad config or arguments, 3 file I/O, 4 no pose could be
estimated in the whole batch, 5 malformed or mismatched scene/results files.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import __version__
from .config import RunConfig, config_from_dict, load_config
from .errors import ConfigInvalid, SceneInvalid, SchemaMismatch
from .experiments import estimate_records, model_for, parallel_map, run_batch, simulate_scene
from .files import (
    RESULTS_SCHEMA,
    SCENE_SCHEMA,
    SCHEMA_VERSION,
    check_header,
    dump_json,
    file_sha256,
    load_json,
    record_poses,
    scene_from_dict,
    scene_to_dict,
)
from .metrics import METRICS
from .report import (
    REPORT_COLUMNS,
    SERIES_COLUMNS,
    TIMING_COLUMNS,
    group_key,
    plot_keypoints,
    plot_runtime,
    plot_views,
    pretty_table,
    report_rows,
    series_rows,
    tsv_text,
    write_tsv,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SOLVER, EXIT_SCHEMA = 0, 2, 3, 4, 5


class BatchFailed(Exception):
    pass


def _override(cfg: RunConfig, args):
    sim = cfg.simulator
    if getattr(args, "seed", None) is not None:
        sim = replace(sim, rng_seed=args.seed)
    if getattr(args, "views", None) is not None and not isinstance(args.views, list):
        sim = replace(sim, view_count=args.views)
    if getattr(args, "keypoints", None) is not None and not isinstance(args.keypoints, list):
        sim = replace(sim, keypoints=args.keypoints)
    solver = cfg.solver
    if getattr(args, "no_refine", False):
        solver = replace(solver, refine=False)
    scenes = args.scenes if getattr(args, "scenes", None) is not None else cfg.scenes
    metrics = args.metric or cfg.metrics if hasattr(args, "metric") else cfg.metrics
    out = RunConfig(sim.validate(), solver.validate(), list(metrics), scenes, cfg.object)
    if out.scenes < 1:
        raise ConfigInvalid("simulator.scenes: must be a positive integer")
    return out


def _read(path, schema):
    try:
        doc = load_json(path)
    except json.JSONDecodeError as exc:
        raise SceneInvalid(f"{path}: not valid JSON ({exc})") from None
    check_header(doc, schema)
    return doc


# --------------------------------------------------------------------------
# simulate


def _simulate_one(args):
    cfg, k = args
    seed, views, obs, truth = simulate_scene(cfg, k)
    return scene_to_dict(k, seed, views, obs, truth)


def scene_document(cfg: RunConfig, jobs=1):
    model = model_for(cfg)
    return {
        "schema": SCENE_SCHEMA,
        "version": SCHEMA_VERSION,
        "units": {"length": "mm", "pixel": "px"},
        "config_hash": cfg.hash(),
        "seed": cfg.simulator.rng_seed,
        "config": cfg.to_dict(),
        "model": {
            "shape": model.name,
            "keypoints": int(len(model.keypoints)),
            "symmetry": model.symmetry.to_config(),
            "diameter": float(model.diameter),
        },
        "scenes": parallel_map(_simulate_one, [(cfg, k) for k in range(cfg.scenes)], jobs),
    }


def cmd_simulate(config_path, out_path, args=None, jobs=1):
    cfg = load_config(config_path)
    if args is not None:
        cfg = _override(cfg, args)
    doc = scene_document(cfg, jobs)
    dump_json(doc, out_path)
    n_inst = sum(len(s["instances"]) for s in doc["scenes"])
    n_det = sum(len(row) for s in doc["scenes"] for row in s["observations"])
    print(
        f"seed={doc['seed']} config_hash={doc['config_hash']} scenes={len(doc['scenes'])} "
        f"views={cfg.simulator.view_count} instances={n_inst} detections={n_det} -> {out_path}"
    )
    return doc


# --------------------------------------------------------------------------
# estimate


def _estimate_one(args):
    scene, cfg = args
    views, obs, _ = scene_from_dict(scene)
    model = model_for(cfg)
    if any(len(o.keypoints) != len(model.keypoints) for row in obs for o in row):
        raise SceneInvalid(f"scene {scene.get('scene_id')}: keypoint count differs from the model")
    records, secs = estimate_records(views, obs, model, cfg.solver)
    return {"scene_id": scene["scene_id"], "estimates": records}, secs


def results_config(scene_doc, solver_override=None, args=None):
    cfg = config_from_dict(scene_doc["config"])
    if solver_override is not None:
        cfg = replace(cfg, solver=solver_override)
    if args is not None:
        solver = cfg.solver
        if getattr(args, "seed", None) is not None:
            solver = replace(solver, seed=args.seed)
        if getattr(args, "no_refine", False):
            solver = replace(solver, refine=False)
        cfg = replace(cfg, solver=solver)
    return cfg


def cmd_estimate(scene_path, solver_config, out_path, args=None, jobs=1):
    doc = _read(scene_path, SCENE_SCHEMA)
    solver = load_config(solver_config).solver if solver_config else None
    cfg = results_config(doc, solver, args)
    out = parallel_map(_estimate_one, [(s, cfg) for s in doc["scenes"]], jobs)
    results = {
        "schema": RESULTS_SCHEMA,
        "version": SCHEMA_VERSION,
        "config_hash": cfg.hash(),
        "scene_config_hash": doc["config_hash"],
        "seed": cfg.solver.seed,
        "scene_sha256": file_sha256(scene_path),
        "solver": cfg.solver.to_dict(),
        "scenes": [rec for rec, _ in out],
    }
    dump_json(results, out_path)
    timing = {
        "config_hash": cfg.hash(),
        "seed": cfg.solver.seed,
        "scenes": [{"scene_id": rec["scene_id"], "solver_seconds": secs} for rec, secs in out],
        "solver_seconds": sum(secs for _, secs in out),
    }
    dump_json(timing, out_path + ".timing.json")
    est = [e for rec, _ in out for e in rec["estimates"]]
    ok = sum(e["status"] == "ok" for e in est)
    print(
        f"seed={cfg.solver.seed} config_hash={cfg.hash()} scenes={len(out)} associations={len(est)} "
        f"ok={ok} failed={len(est) - ok} solver_seconds={timing['solver_seconds']:.3f} -> {out_path}"
    )
    if ok == 0:
        raise BatchFailed("no pose could be estimated in this batch")
    return results


# --------------------------------------------------------------------------
# evaluate


def _evaluate_pair(results_path, truth_path):
    res = _read(results_path, RESULTS_SCHEMA)
    truth = _read(truth_path, SCENE_SCHEMA)
    if res.get("scene_sha256") != file_sha256(truth_path):
        raise SchemaMismatch(f"{results_path} was not computed from {truth_path}")
    cfg = results_config(truth)
    try:
        cfg = replace(cfg, solver=type(cfg.solver).from_dict(res["solver"]))
    except (KeyError, TypeError) as exc:
        raise SchemaMismatch(f"{results_path}: bad solver block ({exc})") from None
    by_id = {s["scene_id"]: s for s in res["scenes"]}
    scenes = []
    for sc in truth["scenes"]:
        _, _, t = scene_from_dict(sc)
        if sc["scene_id"] not in by_id:
            raise SchemaMismatch(f"scene {sc['scene_id']} missing from {results_path}")
        try:
            ests = record_poses(by_id[sc["scene_id"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"{results_path}: malformed estimate ({exc})") from None
        scenes.append((ests, t["poses"], t["visibility_score"]))
    timing = None
    side = results_path + ".timing.json"
    if os.path.exists(side):
        timing = load_json(side)
    return cfg, scenes, timing


def _timing_row(cfg, n_scenes, seconds):
    obj, views, kp, refine = group_key(cfg)
    return {
        "object": obj,
        "views": views,
        "keypoints": kp,
        "refine": int(refine),
        "scenes": n_scenes,
        "solver_seconds": seconds,
        "seconds_per_scene": seconds / max(n_scenes, 1),
    }


def write_report(rows, timing_rows, out_dir, meta):
    """Write report.tsv, series.tsv, timing.tsv and the figures into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    series = series_rows(rows)
    write_tsv(os.path.join(out_dir, "report.tsv"), REPORT_COLUMNS, rows, meta)
    write_tsv(os.path.join(out_dir, "series.tsv"), SERIES_COLUMNS, series, meta)
    plot_views(rows, os.path.join(out_dir, "views.png"), meta)
    plot_keypoints(series, os.path.join(out_dir, "keypoints.png"), meta)
    if timing_rows:
        write_tsv(os.path.join(out_dir, "timing.tsv"), TIMING_COLUMNS, timing_rows, meta)
        plot_runtime(timing_rows, os.path.join(out_dir, "runtime.png"), meta)


def cmd_evaluate(results_path, truth_path, metrics=None, out_dir=None, extra_pairs=(), pretty=False):
    groups = {}
    timing_rows = []
    hashes, seeds = [], []
    for rp, tp in [(results_path, truth_path), *extra_pairs]:
        cfg, scenes, timing = _evaluate_pair(rp, tp)
        key = group_key(cfg)
        model = model_for(cfg)
        if key in groups:
            groups[key][1].extend(scenes)
        else:
            groups[key] = (model, list(scenes))
        if timing is not None:
            timing_rows.append(_timing_row(cfg, len(scenes), timing["solver_seconds"]))
        hashes.append(cfg.hash())
        seeds.append(f"{cfg.simulator.rng_seed}/{cfg.solver.seed}")
        metrics = metrics or cfg.metrics
    rows = report_rows(groups, metrics)
    meta = {"config_hash": ",".join(hashes), "seed": ",".join(seeds)}
    sys.stdout.write(tsv_text(REPORT_COLUMNS, rows, meta))
    if pretty:
        print()
        print(pretty_table(rows))
    if out_dir:
        write_report(rows, timing_rows, out_dir, meta)
    return rows


# --------------------------------------------------------------------------
# sweep


def cmd_sweep(cfg: RunConfig, views, keypoints, out_dir, ablation=False, jobs=1, pretty=False):
    """Simulate and solve every (views, keypoints) combination in memory and report."""
    groups = {}
    timing_rows = []
    hashes = []
    for v in views:
        for n in keypoints:
            run = replace(cfg, simulator=replace(cfg.simulator, view_count=v, keypoints=n).validate())
            outcomes = run_batch(run, jobs=jobs)
            model = model_for(run)
            gts = [(o.gt_poses, o.visibility) for o in outcomes]
            groups[group_key(run)] = (model, [(o.estimates, g, vis) for o, (g, vis) in zip(outcomes, gts)])
            timing_rows.append(_timing_row(run, len(outcomes), sum(o.seconds for o in outcomes)))
            if ablation and run.solver.refine:
                off = replace(run, solver=replace(run.solver, refine=False))
                groups[group_key(off)] = (model, [(o.aligned, g, vis) for o, (g, vis) in zip(outcomes, gts)])
            hashes.append(run.hash())
    rows = report_rows(groups, cfg.metrics)
    meta = {"config_hash": ",".join(hashes), "seed": f"{cfg.simulator.rng_seed}/{cfg.solver.seed}"}
    sys.stdout.write(tsv_text(REPORT_COLUMNS, rows, meta))
    if pretty:
        print()
        print(pretty_table(rows))
    write_report(rows, timing_rows, out_dir, meta)
    return rows


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mvkp", description="Multi-view dense-keypoint 6D pose estimation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="TOML run config ([simulator], [solver], [metrics], [object])")
        sp.add_argument("--seed", type=int, help="overrides the seed from the config")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (output does not depend on it)")

    s = sub.add_parser("simulate", help="generate a synthetic scene file")
    common(s)
    s.add_argument("--views", type=int)
    s.add_argument("--keypoints", type=int)
    s.add_argument("--scenes", type=int)
    s.add_argument("--out", required=True)

    e = sub.add_parser("estimate", help="estimate poses for every scene in a scene file")
    e.add_argument("scene")
    common(e)
    e.add_argument("--no-refine", action="store_true", help="skip stage-3 refinement")
    e.add_argument("--out", required=True)

    v = sub.add_parser("evaluate", help="score a results file against its scene file")
    v.add_argument("results")
    v.add_argument("truth")
    v.add_argument("--pair", nargs=2, action="append", default=[], metavar=("RESULTS", "TRUTH"),
                   help="further results/scene pairs to tabulate together")
    v.add_argument("--metric", action="append", choices=METRICS)
    v.add_argument("--out", help="directory for report.tsv, series.tsv and figures")
    v.add_argument("--pretty", action="store_true", help="also print an aligned table")

    w = sub.add_parser("sweep", help="view-count / keypoint-count sweep with report and figures")
    common(w)
    w.add_argument("--views", type=int, nargs="+", default=None)
    w.add_argument("--keypoints", type=int, nargs="+", default=None)
    w.add_argument("--scenes", type=int)
    w.add_argument("--metric", action="append", choices=METRICS)
    w.add_argument("--no-refine", action="store_true")
    w.add_argument("--ablation", action="store_true", help="also report the unrefined (stage-2) poses")
    w.add_argument("--pretty", action="store_true")
    w.add_argument("--out", required=True)
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        cmd_simulate(args.config, args.out, args, args.jobs)
    elif args.command == "estimate":
        cmd_estimate(args.scene, args.config, args.out, args, args.jobs)
    elif args.command == "evaluate":
        cmd_evaluate(args.results, args.truth, args.metric, args.out, [tuple(x) for x in args.pair], args.pretty)
    elif args.command == "sweep":
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, solver=replace(cfg.solver, seed=args.seed))
        cfg = _override(cfg, args)
        views = args.views or [cfg.simulator.view_count]
        keypoints = args.keypoints or [cfg.simulator.keypoints]
        cmd_sweep(cfg, views, keypoints, args.out, args.ablation, args.jobs, args.pretty)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except ConfigInvalid as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SceneInvalid, SchemaMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except BatchFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
