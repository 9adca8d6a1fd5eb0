"""Pose error metrics and average recall."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyModel
from .geometry import Pose, rotation_angle
from .symmetry import SymmetryGroup, equivalent_poses

METRICS = ("add", "5mm10deg", "2mm3deg")
VISIBILITY_MIN = 0.75
ADD_DIAMETER_FRACTION = 0.1


def add_error(est: Pose, gt: Pose, model_points):
    """Mean distance between model points under the two poses (mm)."""
    P = np.asarray(model_points, dtype=float)
    if P.size == 0:
        raise EmptyModel("no model points")
    return float(np.linalg.norm(est.apply(P) - gt.apply(P), axis=1).mean())


def sym_add_error(est: Pose, gt: Pose, model_points, group: SymmetryGroup):
    return min(add_error(est, g, model_points) for g in equivalent_poses(gt, group))


def pose_errors(est: Pose, gt: Pose, group: SymmetryGroup | None = None):
    """(translation mm, rotation deg) of the closest symmetric equivalent.

    Candidates are ranked by rotation error, then translation error.
    """
    group = group or SymmetryGroup.trivial()
    te = float(np.linalg.norm(est.translation - gt.translation))
    re = min(np.degrees(rotation_angle(est.rotation.T @ gt.rotation @ S)) for S in group.elements)
    return te, float(re)


def pose_within(est: Pose, gt: Pose, group: SymmetryGroup | None, trans_tol, rot_tol):
    if trans_tol <= 0 or rot_tol <= 0:
        raise ValueError("tolerances must be positive")
    te, re = pose_errors(est, gt, group)
    return te <= trans_tol and re <= rot_tol


def passes(metric, est: Pose, gt: Pose, model, group=None):
    """Metric test used for recall; ``model`` supplies points and diameter."""
    group = group if group is not None else model.symmetry
    if metric == "add":
        return sym_add_error(est, gt, model.model_points, group) < ADD_DIAMETER_FRACTION * model.diameter
    if metric == "5mm10deg":
        return pose_within(est, gt, group, 5.0, 10.0)
    if metric == "2mm3deg":
        return pose_within(est, gt, group, 2.0, 3.0)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass
class RecallResult:
    recall: float
    matched: int
    valid_gt: int
    false_detections: int


def assign_estimates(estimates, gts, model, group=None):
    """Greedy one-to-one assignment by ascending symmetric ADD.

    Returns ``{gt_index: estimate_index}``.
    """
    group = group if group is not None else model.symmetry
    cand = []
    for e, est in enumerate(estimates):
        if est is None:
            continue
        for g, gt in enumerate(gts):
            cand.append((sym_add_error(est, gt, model.model_points, group), g, e))
    cand.sort()
    used_e, out = set(), {}
    for _, g, e in cand:
        if g in out or e in used_e:
            continue
        out[g] = e
        used_e.add(e)
    return out


def average_recall(scenes, model, metric, group=None):
    """Average recall (percent) over scenes.

    ``scenes`` is an iterable of ``(estimates, gt_poses, visibility_scores)``;
    ground truths with visibility at or below 0.75 are left out of the
    denominator, and estimates without a ground truth count as false
    detections only.
    """
    hit = total = false_det = 0
    for estimates, gts, vis in scenes:
        assign = assign_estimates(estimates, gts, model, group)
        n_est = sum(e is not None for e in estimates)
        false_det += n_est - len(assign)
        for g, gt in enumerate(gts):
            if vis[g] <= VISIBILITY_MIN:
                continue
            total += 1
            e = assign.get(g)
            if e is not None and passes(metric, estimates[e], gt, model, group):
                hit += 1
    recall = 100.0 * hit / total if total else 0.0
    return RecallResult(recall, hit, total, false_det)
