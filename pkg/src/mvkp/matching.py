"""Cross-view association of dense keypoint instances.

Two views with the shortest baseline are matched first: the distance between
an instance in one view and an instance in the other is the Sampson distance
over their co-visible, index-aligned keypoints, averaged, and pairs are kept
under the mutual-nearest rule. Each matched pair is triangulated and the
points are reprojected into the remaining views, where the instance with the
lowest reprojection error is attached.

``match_pair`` averages with the mean. The scene-level ``associate`` ranks
with the median by default: a fifth of confident outliers puts the mean near
1e4 px^2 for every pair, right or wrong, while the median stays at the noise
level for the right pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientViews, NoCovisibleKeypoints
from .geometry import (
    camera_pairs_by_baseline,
    fundamental_from_cameras,
    reprojection_errors,
    sampson_distances,
    triangulate_batch,
)

DEFAULT_PROPAGATE_THRESHOLD = 10.0


@dataclass
class InstanceAssociation:
    """One physical object: ``members[view] = index into that view's detections``."""

    members: dict
    seed_pair: tuple
    seed_score: float
    view_errors: dict = field(default_factory=dict)
    covisibility: np.ndarray | None = None

    @property
    def views(self):
        return sorted(self.members)


def _covisible_sampson(inst_u, inst_v, F):
    co = inst_u.visibility & inst_v.visibility
    if not co.any():
        raise NoCovisibleKeypoints("instances share no visible keypoint")
    d = sampson_distances(F, inst_u.keypoints[co], inst_v.keypoints[co])
    d = d[~np.isnan(d)]
    if len(d) == 0:
        raise NoCovisibleKeypoints("all co-visible keypoints sit on epipoles")
    return d


def mean_sampson(inst_u, inst_v, F):
    """Mean Sampson distance over keypoints visible in both instances."""
    return float(_covisible_sampson(inst_u, inst_v, F).mean())


def median_sampson(inst_u, inst_v, F):
    return float(np.median(_covisible_sampson(inst_u, inst_v, F)))


STATISTICS = {"mean": mean_sampson, "median": median_sampson}


def distance_matrix(insts_u, insts_v, F, statistic="mean"):
    """Pairwise instance distances; unmatchable pairs are ``inf``."""
    fn = STATISTICS[statistic]
    D = np.full((len(insts_u), len(insts_v)), np.inf)
    for i, a in enumerate(insts_u):
        for j, b in enumerate(insts_v):
            try:
                D[i, j] = fn(a, b, F)
            except NoCovisibleKeypoints:
                pass
    return D


def mutual_nearest(D):
    """Pairs (i, j) that are each other's minimum; argmin keeps the lowest index on ties."""
    if D.size == 0:
        return []
    row = np.argmin(D, axis=1)
    col = np.argmin(D, axis=0)
    return [(i, int(row[i])) for i in range(D.shape[0]) if np.isfinite(D[i, row[i]]) and col[row[i]] == i]


def match_pair(view_u_instances, view_v_instances, F, statistic="mean"):
    return mutual_nearest(distance_matrix(view_u_instances, view_v_instances, F, statistic))


def select_seed_pair(views):
    if len(views) < 2:
        raise InsufficientViews("need at least two views")
    return camera_pairs_by_baseline(views)[0]


def _triangulate_members(views, members, instances, mask_fn):
    ids = sorted(members)
    insts = [instances[w][members[w]] for w in ids]
    pixels = np.stack([o.keypoints for o in insts])
    mask = np.stack([o.visibility for o in insts]) & mask_fn(ids, pixels)
    P = np.stack([views[w].projection_matrix for w in ids])
    pts = triangulate_batch(pixels, mask, P)
    for w in ids:
        with np.errstate(invalid="ignore"):
            depth = pts @ views[w].rotation[2] + views[w].translation[2]
        pts[~(depth > 1e-9)] = np.nan
    return pts


def _instance_error(view, points, inst):
    """Median reprojection error of triangulated points against a detection."""
    use = inst.visibility & ~np.isnan(points[:, 0])
    if not use.any():
        return np.inf
    err = reprojection_errors(points[use], inst.keypoints[use][None], view.projection_matrix[None])[0]
    return float(np.median(err))


def _grow(seed, views, instances, threshold, claimed):
    """Attach detections in the remaining views, nearest camera first."""
    u, i, v, j = seed
    members = {u: i, v: j}
    F = fundamental_from_cameras(views[u], views[v])
    epi = sampson_distances(F, instances[u][i].keypoints, instances[v][j].keypoints)
    gate = (threshold / 2) ** 2

    def seed_mask(ids, pixels):
        # epipolar-inconsistent pairs are confident outliers in one of the views
        return np.broadcast_to(epi < gate, pixels.shape[:2])

    pts = _triangulate_members(views, members, instances, seed_mask)
    view_errors = {}
    remaining = [w for w in range(len(views)) if w not in members]
    while remaining:
        centers = np.stack([views[m].center for m in members])
        dist = [float(np.linalg.norm(centers - views[w].center, axis=1).min()) for w in remaining]
        w = remaining.pop(int(np.argmin(dist)))
        errs = [np.inf if (w, k) in claimed else _instance_error(views[w], pts, inst) for k, inst in enumerate(instances[w])]
        if not errs or min(errs) >= threshold:
            continue
        k = int(np.argmin(errs))
        members[w] = k
        view_errors[w] = errs[k]
        current = pts

        def consistent(ids, pixels, current=current):
            P = np.stack([views[m].projection_matrix for m in ids])
            return reprojection_errors(np.nan_to_num(current), pixels, P) < threshold

        pts = _triangulate_members(views, members, instances, consistent)
    return members, view_errors


def propagate_association(seed_pairs, all_views, all_instances, threshold=DEFAULT_PROPAGATE_THRESHOLD, claimed=None):
    """Extend seed matches to the remaining views.

    ``seed_pairs`` holds ``(u, i, v, j, score)`` tuples. Seed keypoints are
    triangulated when their Sampson distance is below ``(threshold / 2)**2``.
    Remaining views are visited nearest camera first; in each, the detection
    with the lowest median reprojection error is attached if that error is
    below ``threshold``, after which the points are re-triangulated from all
    attached views. Seeds are processed in ascending score order, so the
    better seed match wins a contested detection. ``claimed`` is a set of
    ``(view, instance)`` already used elsewhere; it is updated in place.
    """
    claimed = set() if claimed is None else claimed
    out = []
    for u, i, v, j, score in sorted(seed_pairs, key=lambda s: (s[4], s[:4])):
        if (u, i) in claimed or (v, j) in claimed:
            continue
        claimed.update({(u, i), (v, j)})
        members, view_errors = _grow((u, i, v, j), all_views, all_instances, threshold, claimed)
        claimed.update(members.items())
        vis = np.stack([all_instances[w][k].visibility for w, k in sorted(members.items())])
        out.append(InstanceAssociation(dict(sorted(members.items())), (u, v), score, view_errors, vis.sum(axis=0)))
    return out


def associate(views, observations, threshold=DEFAULT_PROPAGATE_THRESHOLD, statistic="median"):
    """Group detections of all views into per-object associations.

    The minimal-baseline pair seeds the association. Detections left over
    (for instance occluded in a seed view) are retried with the next view
    pairs in order of increasing baseline. A mutual-nearest seed is only
    accepted when its median Sampson distance is below ``threshold**2``, so
    two lone detections of different objects are not paired.
    """
    if len(views) < 2:
        raise InsufficientViews("need at least two views")
    claimed = set()
    out = []
    for u, v in camera_pairs_by_baseline(views):
        free_u = [i for i in range(len(observations[u])) if (u, i) not in claimed]
        free_v = [j for j in range(len(observations[v])) if (v, j) not in claimed]
        if not free_u or not free_v:
            continue
        F = fundamental_from_cameras(views[u], views[v])
        D = distance_matrix([observations[u][i] for i in free_u], [observations[v][j] for j in free_v], F, statistic)
        seeds = []
        for a, b in mutual_nearest(D):
            ia, jb = free_u[a], free_v[b]
            try:
                med = median_sampson(observations[u][ia], observations[v][jb], F)
            except NoCovisibleKeypoints:
                continue
            if med < threshold**2:
                seeds.append((u, ia, v, jb, float(D[a, b])))
        if seeds:
            out.extend(propagate_association(seeds, views, observations, threshold, claimed))
    return out
