"""Batch simulation, estimation and scoring shared by the CLI and the acceptance suite."""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .config import RunConfig, build_model
from .errors import MvkpError
from .files import estimate_record
from .matching import associate
from .metrics import assign_estimates, average_recall, passes, sym_add_error
from .simulator import generate_scene
from .solver import SolverConfig, estimate_pose


def scene_seed(base, index):
    """Per-scene seed derived from the batch seed and the scene index."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


@lru_cache(maxsize=16)
def cached_model(shape, n_keypoints, object_key=None):
    return build_model(shape, n_keypoints, json.loads(object_key) if object_key else None)


def model_for(cfg: RunConfig):
    key = json.dumps(cfg.object, sort_keys=True) if cfg.object else None
    return cached_model(cfg.simulator.object, cfg.simulator.keypoints, key)


def solve_scene(views, observations, model, solver_cfg: SolverConfig):
    """Associate detections and estimate one pose per association.

    Returns ``(items, seconds)`` where each item is
    ``(association, PoseEstimate or None, error or None)``.
    """
    t0 = time.perf_counter()
    items = []
    for assoc in associate(views, observations, solver_cfg.propagate_threshold, solver_cfg.match_statistic):
        try:
            items.append((assoc, estimate_pose(assoc, views, observations, model, solver_cfg), None))
        except MvkpError as exc:
            items.append((assoc, None, exc))
    return items, time.perf_counter() - t0


@dataclass
class SceneOutcome:
    scene_id: int
    seed: int
    gt_poses: list
    visibility: np.ndarray
    estimates: list  # refined (or aligned when refinement is off) pose per association, None if failed
    aligned: list
    initial_costs: list
    costs: list
    seconds: float
    records: list = field(default_factory=list)
    labels: list = field(default_factory=list)  # majority instance id per association (evaluation only)


def _majority_label(assoc, observations):
    ids = [observations[v][k].instance_id for v, k in assoc.members.items()]
    vals, counts = np.unique(np.array(ids, dtype=float), return_counts=True)
    return int(vals[np.argmax(counts)]), len(set(ids)) == 1


def simulate_scene(cfg: RunConfig, index: int):
    """Scene ``index`` of a batch: ``(seed, views, observations, truth)``."""
    seed = scene_seed(cfg.simulator.rng_seed, index)
    views, observations, truth = generate_scene(replace(cfg.simulator, rng_seed=seed), model_for(cfg))
    return seed, views, observations, truth


def estimate_records(views, observations, model, solver_cfg):
    """Solve one scene; returns ``(estimate records, solver seconds)``."""
    items, secs = solve_scene(views, observations, model, solver_cfg)
    return [estimate_record(a.members, est, err) for a, est, err in items], secs


def run_scene(cfg: RunConfig, index: int):
    seed, views, observations, truth = simulate_scene(cfg, index)
    model = model_for(cfg)
    items, secs = solve_scene(views, observations, model, cfg.solver)
    out = SceneOutcome(index, seed, truth.poses, truth.visibility_score, [], [], [], [], secs)
    for assoc, est, err in items:
        out.records.append(estimate_record(assoc.members, est, err))
        out.labels.append(_majority_label(assoc, observations))
        if est is None:
            out.estimates.append(None)
            out.aligned.append(None)
            out.initial_costs.append(np.nan)
            out.costs.append(np.nan)
        else:
            out.estimates.append(est.pose)
            out.aligned.append(est.aligned_pose)
            out.initial_costs.append(est.initial_cost)
            out.costs.append(est.cost)
    return out


def _run_scene_args(args):
    return run_scene(*args)


def parallel_map(fn, args, jobs=1):
    """``map`` over argument tuples, in a process pool when ``jobs > 1``; order is kept."""
    args = list(args)
    if jobs and jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, args, chunksize=max(1, len(args) // (4 * jobs))))
    return [fn(a) for a in args]


def run_batch(cfg: RunConfig, n_scenes=None, jobs=1):
    """Simulate and solve ``n_scenes`` scenes; output order is by scene index."""
    n = cfg.scenes if n_scenes is None else n_scenes
    return parallel_map(_run_scene_args, [(cfg, k) for k in range(n)], jobs)


def recall(outcomes, model, metric, use_aligned=False):
    scenes = [(o.aligned if use_aligned else o.estimates, o.gt_poses, o.visibility) for o in outcomes]
    return average_recall(scenes, model, metric)


def per_instance_errors(outcomes, model, use_aligned=False):
    """Symmetric ADD of every ground-truth instance (inf when not estimated).

    Estimates are matched to ground truth by the greedy rule used for recall.
    """
    errs = []
    for o in outcomes:
        ests = o.aligned if use_aligned else o.estimates
        assign = assign_estimates(ests, o.gt_poses, model)
        for g, gt in enumerate(o.gt_poses):
            e = assign.get(g)
            errs.append(np.inf if e is None else sym_add_error(ests[e], gt, model.model_points, model.symmetry))
    return np.array(errs)


def success_flags(outcomes, model, metric, use_aligned=False):
    """Per ground-truth instance pass/fail under ``metric`` (greedy assignment)."""
    flags = []
    for o in outcomes:
        ests = o.aligned if use_aligned else o.estimates
        assign = assign_estimates(ests, o.gt_poses, model)
        for g, gt in enumerate(o.gt_poses):
            e = assign.get(g)
            flags.append(e is not None and passes(metric, ests[e], gt, model))
    return np.array(flags, dtype=bool)
