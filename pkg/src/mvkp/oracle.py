"""Brute-force references for tests.

Nothing here imports the geometry, matching or solver modules: Sampson
distances, projections and rotations are recomputed from scratch (rotations
through scipy) so that a bug in the production path cannot hide itself.
"""
from __future__ import annotations

from collections import namedtuple
from itertools import product

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GridTooLarge

GridResult = namedtuple("GridResult", "rotation translation value")

MAX_GRID_CELLS = 10_000_000


def _sampson_loop(F, p, q):
    ph = [p[0], p[1], 1.0]
    qh = [q[0], q[1], 1.0]
    Fp = [sum(F[r][c] * ph[c] for c in range(3)) for r in range(3)]
    Ftq = [sum(F[c][r] * qh[c] for c in range(3)) for r in range(3)]
    num = sum(qh[r] * Fp[r] for r in range(3)) ** 2
    den = Fp[0] ** 2 + Fp[1] ** 2 + Ftq[0] ** 2 + Ftq[1] ** 2
    return None if den <= 1e-18 else num / den


def brute_force_match(instances_u, instances_v, F):
    """All mean Sampson distances by direct summation, then the mutual-nearest rule.

    On ties the lower index wins on both sides.
    """
    F = [[float(x) for x in row] for row in np.asarray(F)]
    D = {}
    for i, a in enumerate(instances_u):
        for j, b in enumerate(instances_v):
            terms = []
            for k in range(len(a.keypoints)):
                if a.visibility[k] and b.visibility[k]:
                    s = _sampson_loop(F, a.keypoints[k], b.keypoints[k])
                    if s is not None:
                        terms.append(s)
            D[i, j] = sum(terms) / len(terms) if terms else float("inf")
    pairs = set()
    for i in range(len(instances_u)):
        row = [D[i, j] for j in range(len(instances_v))]
        if not row or min(row) == float("inf"):
            continue
        j = row.index(min(row))
        col = [D[r, j] for r in range(len(instances_u))]
        if col.index(min(col)) == i:
            pairs.add((i, j))
    return pairs


def _objective(R, ts, keypoints, observations, cams, kernel_width):
    """Objective for one rotation and a stack of translations (T, 3)."""
    total = np.zeros(len(ts))
    RP = keypoints @ R.T
    for v, pix, vis in observations:
        K, Rc, tc = cams[v]
        X = RP[None, :, :] + ts[:, None, :]
        C = X @ Rc.T + tc
        H = C @ K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = H[..., :2] / H[..., 2:3]
        r = np.sqrt(((uv - pix[None]) ** 2).sum(axis=2))
        r = np.where(H[..., 2] > 0, r, np.inf)
        if kernel_width is None:
            loss = r
        else:
            loss = np.where(r <= kernel_width, 0.5 * r * r, kernel_width * (r - 0.5 * kernel_width))
        total += (loss * vis[None, :]).sum(axis=1)
    return total


def grid_pose_search(observations, views, model, rotation_step, translation_step, bounds, hint, kernel_width=None):
    """Exhaustive search of the joint reprojection objective on a local grid.

    observations: ``[(view_index, pixels (N, 2), visible (N,)), ...]``.
    bounds: ``(rotation half-range deg, translation half-range mm)``.
    hint: ``(R0, t0)``; candidates are ``(exp(w) R0, t0 + dt)``.
    ``kernel_width=None`` sums plain pixel distances, otherwise the Huber
    kernel of that width is applied to each distance.
    """
    keypoints = np.asarray(getattr(model, "keypoints", model), dtype=float)
    rot_half, trans_half = bounds
    n_r = int(np.floor(rot_half / rotation_step + 1e-9))
    n_t = int(np.floor(trans_half / translation_step + 1e-9))
    r_axis = np.arange(-n_r, n_r + 1) * np.deg2rad(rotation_step)
    t_axis = np.arange(-n_t, n_t + 1) * translation_step
    cells = len(r_axis) ** 3 * len(t_axis) ** 3
    if cells > MAX_GRID_CELLS:
        raise GridTooLarge(f"{cells} grid cells exceed {MAX_GRID_CELLS}")
    cams = {
        i: (np.asarray(v.intrinsics, float), np.asarray(v.rotation, float), np.asarray(v.translation, float))
        for i, v in enumerate(views)
    }
    obs = [(int(v), np.asarray(p, float), np.asarray(b, float)) for v, p, b in observations]
    R0 = np.asarray(hint[0], dtype=float)
    t0 = np.asarray(hint[1], dtype=float)
    ts = t0 + np.array(list(product(t_axis, t_axis, t_axis)))
    best = (np.inf, None, None)
    for w in product(r_axis, r_axis, r_axis):
        R = Rotation.from_rotvec(np.array(w)).as_matrix() @ R0
        vals = _objective(R, ts, keypoints, obs, cams, kernel_width)
        k = int(np.argmin(vals))
        if vals[k] < best[0]:
            best = (float(vals[k]), R, ts[k])
    return GridResult(best[1], best[2], best[0])


def pose_objective(R, t, observations, views, model, kernel_width=None):
    """The same objective as ``grid_pose_search`` at a single pose."""
    keypoints = np.asarray(getattr(model, "keypoints", model), dtype=float)
    cams = {
        i: (np.asarray(v.intrinsics, float), np.asarray(v.rotation, float), np.asarray(v.translation, float))
        for i, v in enumerate(views)
    }
    obs = [(int(v), np.asarray(p, float), np.asarray(b, float)) for v, p, b in observations]
    return float(_objective(np.asarray(R, float), np.asarray(t, float)[None], keypoints, obs, cams, kernel_width)[0])


def fd_gradient(fn, params, h=1e-5):
    """Central finite differences.

    For scalar ``fn`` the result has the shape of ``params``; for array-valued
    ``fn`` it has shape ``fn(params).shape + params.shape``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(params, dtype=float)
    f0 = np.asarray(fn(x.copy()), dtype=float)
    out = np.zeros(f0.shape + x.shape)
    flat = x.reshape(-1)
    for idx in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[idx] += h
        xm[idx] -= h
        d = (np.asarray(fn(xp.reshape(x.shape)), float) - np.asarray(fn(xm.reshape(x.shape)), float)) / (2 * h)
        out[(Ellipsis,) + np.unravel_index(idx, x.shape)] = d
    return out
