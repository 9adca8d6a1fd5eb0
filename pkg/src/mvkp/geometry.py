"""Calibrated pinhole cameras, projection, epipolar geometry and triangulation.

Conventions: lengths in millimetres, pixels as (u, v). A camera maps world
points by ``x_cam = R @ x_world + t`` and the world frame is the frame of the
first camera. An object pose ``(R, t)`` maps model points into the world.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import (
    CheiralityViolation,
    DegenerateBaseline,
    DegenerateEpipolarPoint,
    GeometryError,
    InsufficientViews,
    NonPositiveDepth,
    ParallelRays,
)

DEPTH_EPS = 1e-9
ORTHO_TOL = 1e-9


def _as_rotation(R, name="rotation"):
    R = np.array(R, dtype=float).reshape(3, 3)
    if not np.all(np.isfinite(R)):
        raise GeometryError(f"{name} has non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise GeometryError(f"{name} is not a proper rotation")
    return R


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform taking model coordinates to world coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation has non-finite entries")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Transform an (N, 3) array (or a single 3-vector) of model points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self * other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["rotation"], dtype=float), np.asarray(d["translation"], dtype=float))

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class CameraView:
    """Intrinsics and extrinsics of one calibrated view."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple = (1280, 1024)

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float).reshape(3, 3)
        if np.abs(np.tril(K, -1)).max() > 0 or np.any(np.diag(K) <= 0):
            raise GeometryError("intrinsics must be upper-triangular with positive diagonal")
        K = K / K[2, 2]
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", _as_rotation(self.rotation, "camera rotation"))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))
        w, h = self.image_size
        object.__setattr__(self, "image_size", (int(w), int(h)))

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def projection_matrix(self):
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def in_image(self, pixels, margin=0.0):
        pixels = np.asarray(pixels, dtype=float)
        w, h = self.image_size
        return (
            (pixels[..., 0] >= -margin)
            & (pixels[..., 0] <= w - 1 + margin)
            & (pixels[..., 1] >= -margin)
            & (pixels[..., 1] <= h - 1 + margin)
        )

    def to_dict(self):
        return {
            "intrinsics": self.intrinsics.tolist(),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["intrinsics"], dtype=float),
            np.asarray(d["rotation"], dtype=float),
            np.asarray(d["translation"], dtype=float),
            tuple(d["image_size"]),
        )


# --------------------------------------------------------------------------
# SO(3) helpers


def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w):
    """Rodrigues' formula for the exponential map of a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def so3_log(R):
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        axis = B[np.argmax(np.diag(B))]
        axis = axis / np.linalg.norm(axis)
        if vee @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def rotation_angle(R):
    """Geodesic angle of a rotation in radians, accurate near zero."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def rotation_distance(R_a, R_b):
    return rotation_angle(np.asarray(R_a).T @ np.asarray(R_b))


def axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return so3_exp(axis / np.linalg.norm(axis) * angle)


def random_rotation(rng):
    """Uniformly distributed rotation from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# --------------------------------------------------------------------------
# projection


def project_points(view: CameraView, pose: Pose, model_points, check_depth=True):
    """Project (N, 3) model points placed by ``pose`` into ``view``.

    Returns (N, 2) pixels and the (N,) depths. With ``check_depth`` a
    non-positive depth raises NonPositiveDepth.
    """
    P = np.atleast_2d(np.asarray(model_points, dtype=float))
    world = P @ pose.rotation.T + pose.translation
    cam = world @ view.rotation.T + view.translation
    h = cam @ view.intrinsics.T
    depth = h[:, 2]
    if check_depth and np.any(depth <= DEPTH_EPS):
        raise NonPositiveDepth("point has non-positive depth in view")
    return h[:, :2] / depth[:, None], depth


def project(view: CameraView, object_pose: Pose, model_point):
    """Pixel of a single model point, K (R_j (R P + t) + t_j) dehomogenised."""
    px, _ = project_points(view, object_pose, np.reshape(model_point, (1, 3)))
    return px[0]


def project_world(view: CameraView, points):
    """Project world points (N, 3); returns pixels and depths without checks."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h = (pts @ view.rotation.T + view.translation) @ view.intrinsics.T
    return h[:, :2] / h[:, 2:3], h[:, 2]


# --------------------------------------------------------------------------
# epipolar geometry


def fundamental_from_cameras(view_u: CameraView, view_v: CameraView):
    """Fundamental matrix with ``q_v^T F p_u = 0``, normalised to unit Frobenius norm."""
    R_rel = view_v.rotation @ view_u.rotation.T
    t_rel = view_v.translation - R_rel @ view_u.translation
    if np.linalg.norm(t_rel) <= 1e-6:
        raise DegenerateBaseline("camera centres coincide")
    E = skew(t_rel) @ R_rel
    F = np.linalg.inv(view_v.intrinsics).T @ E @ np.linalg.inv(view_u.intrinsics)
    return F / np.linalg.norm(F)


def sampson_distances(F, p, q):
    """Vectorised Sampson distances for (N, 2) pixel arrays p (view u), q (view v).

    Entries whose denominator underflows are returned as NaN.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    ph = np.hstack([p, np.ones((len(p), 1))])
    qh = np.hstack([q, np.ones((len(q), 1))])
    Fp = ph @ F.T
    Ftq = qh @ F
    num = np.einsum("ij,ij->i", qh, Fp) ** 2
    den = Fp[:, 0] ** 2 + Fp[:, 1] ** 2 + Ftq[:, 0] ** 2 + Ftq[:, 1] ** 2
    out = np.full(len(p), np.nan)
    ok = den > 1e-18
    out[ok] = num[ok] / den[ok]
    return out


def sampson_distance(F, p, q):
    d = sampson_distances(F, p, q)[0]
    if np.isnan(d):
        raise DegenerateEpipolarPoint("Sampson denominator underflow")
    return float(d)


# --------------------------------------------------------------------------
# triangulation


def _ray_direction(view: CameraView, pixel):
    d = np.linalg.solve(view.intrinsics, np.array([pixel[0], pixel[1], 1.0]))
    return view.rotation.T @ d


def _camera_centers(P):
    return -np.linalg.solve(P[:, :, :3], P[:, :, 3:])[..., 0]


def _dlt_core(pixels, mask, P, passes=2):
    """Reweighted DLT for pixels (V, N, 2), mask (V, N), P (V, 3, 4).

    A row ``u P3 - P1`` evaluates to depth times the pixel error, so rows
    are divided by the depth of the previous estimate (first pass: distance
    to the camera centre). The world frame is recentred and rescaled around
    the cameras to keep the normal equations well conditioned. Returns
    homogeneous solutions (N, 4) in the conditioned frame and the
    conditioning transform.
    """
    V, N = mask.shape
    C = _camera_centers(P)
    c = C.mean(axis=0)
    L = max(float(np.linalg.norm(C - c, axis=1).mean()), 1.0)
    T = np.eye(4)
    T[:3, :3] *= L
    T[:3, 3] = c
    Pc = P @ T
    px = np.where(mask[..., None], pixels, 0.0)
    r1 = px[..., 0, None] * Pc[:, None, 2] - Pc[:, None, 0]
    r2 = px[..., 1, None] * Pc[:, None, 2] - Pc[:, None, 1]
    rows = np.stack([r1, r2], axis=2)  # (V, N, 2, 4)
    scale = np.linalg.norm(P[:, 2, :3], axis=1)  # depth units of each camera row
    w = np.broadcast_to(1.0 / np.linalg.norm(C - c, axis=1).clip(1e-9)[:, None], (V, N)).copy()
    X = None
    for _ in range(passes):
        A = (rows * (w * mask)[..., None, None]).transpose(1, 0, 2, 3).reshape(N, 2 * V, 4)
        # smallest eigenvector of the 4x4 normal matrix; fine in the conditioned frame
        M = A.transpose(0, 2, 1) @ A
        X = np.linalg.eigh(M)[1][..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = np.einsum("vk,nk->vn", Pc[:, 2], X / X[:, 3:4]) / scale[:, None]
        ok = np.isfinite(depth) & (depth > 1e-9 * L)
        w = np.where(ok, 1.0 / np.where(ok, depth, 1.0), w)
    return X, T


def _dehomogenize(X, T):
    Xw = X @ T.T
    w = Xw[:, 3]
    good = np.abs(w) > 1e-12 * np.linalg.norm(Xw[:, :3], axis=1)
    out = np.full((len(X), 3), np.nan)
    out[good] = Xw[good, :3] / w[good, None]
    return out


def _triangulate_one(pixels, P):
    X, T = _dlt_core(pixels[:, None, :], np.ones((len(P), 1), dtype=bool), P)
    out = _dehomogenize(X, T)[0]
    if np.isnan(out).any():
        raise ParallelRays("triangulated point at infinity")
    return out


def _check_cheirality(X, views):
    for view in views:
        depth = (view.rotation @ X + view.translation)[2]
        if depth <= DEPTH_EPS:
            raise CheiralityViolation("triangulated point behind a camera")


def triangulate_two_view(p_u, p_w, view_u: CameraView, view_w: CameraView):
    d_u = _ray_direction(view_u, p_u)
    d_w = _ray_direction(view_w, p_w)
    angle = np.arctan2(np.linalg.norm(np.cross(d_u, d_w)), abs(d_u @ d_w))
    if angle <= 1e-5:
        raise ParallelRays("viewing rays are (nearly) parallel")
    P = np.stack([view_u.projection_matrix, view_w.projection_matrix])
    X = _triangulate_one(np.array([p_u, p_w], dtype=float), P)
    _check_cheirality(X, (view_u, view_w))
    return X


def triangulate_multiview(observations, views, return_diagnostics=False):
    """DLT triangulation from ``[(view_index, pixel), ...]``.

    Duplicate view indices are kept (they act as extra weight) and reported
    in the diagnostics under ``duplicate_views``.
    """
    if len(observations) < 2:
        raise InsufficientViews("need at least two observations")
    idx = [int(i) for i, _ in observations]
    pixels = np.array([px for _, px in observations], dtype=float)
    P = np.stack([views[i].projection_matrix for i in idx])
    X = _triangulate_one(pixels, P)
    _check_cheirality(X, [views[i] for i in set(idx)])
    if not return_diagnostics:
        return X
    seen, dup = set(), []
    for i in idx:
        if i in seen and i not in dup:
            dup.append(i)
        seen.add(i)
    residuals = [float(np.linalg.norm(project_world(views[i], X)[0][0] - px)) for i, px in zip(idx, pixels)]
    return X, {"duplicate_views": dup, "residuals": residuals}


def triangulate_batch(pixels, mask, projections):
    """Triangulate many points at once.

    pixels (V, N, 2), mask (V, N) bool, projections (V, 3, 4). Returns
    (N, 3) points; points with fewer than two observations, or at infinity,
    come back as NaN.
    """
    pixels = np.asarray(pixels, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    P = np.asarray(projections, dtype=float)
    out = np.full((mask.shape[1], 3), np.nan)
    ok = mask.sum(axis=0) >= 2
    if np.any(ok):
        X, T = _dlt_core(pixels[:, ok], mask[:, ok], P)
        out[ok] = _dehomogenize(X, T)
    return out


def reprojection_errors(points, pixels, projections):
    """Pixel distance of world points (N, 3) to observations (V, N, 2); NaN-safe."""
    Xh = np.hstack([points, np.ones((len(points), 1))])
    h = np.einsum("vij,nj->vni", projections, Xh)
    with np.errstate(invalid="ignore", divide="ignore"):
        proj = h[..., :2] / h[..., 2:3]
        err = np.linalg.norm(proj - pixels, axis=-1)
    err[~(h[..., 2] > DEPTH_EPS)] = np.inf
    err[np.isnan(err)] = np.inf
    return err


def camera_pairs_by_baseline(views):
    """All view index pairs sorted by centre distance, ties lexicographic."""
    pairs = list(combinations(range(len(views)), 2))
    # rounded so that rings built with trig functions tie exactly
    return sorted(pairs, key=lambda p: (round(float(np.linalg.norm(views[p[0]].center - views[p[1]].center)), 9), p))
