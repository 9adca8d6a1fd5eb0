"""Three-stage progressive pose estimation from associated dense keypoints.

1. RANSAC over view pairs: triangulate every co-visible keypoint from the
   sampled pair, reproject into all views, and score the hypothesis by
   ``inliers / (1 + sum of residuals)``. Each keypoint keeps its inlier view
   set and is re-triangulated from it.
2. RANSAC over 3-point Umeyama fits between model keypoints and the
   reconstructed cloud, counting 3D inliers within ``tau2``; the best
   hypothesis is refit on its inliers.
3. Levenberg-Marquardt refinement of the reprojection error under a Huber
   kernel, with multiplicative rotation updates through the exponential map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import (
    ConfigInvalid,
    DegenerateConfiguration,
    InsufficientPoints,
    InsufficientViews,
    NoResidualTerms,
    NoValidHypothesis,
    SolverError,
)
from .geometry import Pose, orthonormalize, reprojection_errors, so3_exp, triangulate_batch


@dataclass
class SolverConfig:
    tau1: float = 2.0
    tau2: float = 5.0
    stage1_iterations: int = 64
    stage2_iterations: int = 256
    kernel_width: float | None = None
    refine: bool = True
    max_iters: int = 50
    seed: int = 0
    propagate_threshold: float = 10.0
    recover_points: bool = True
    match_statistic: str = "median"  # per-pair Sampson aggregate used to rank instance matches

    @property
    def huber_width(self):
        return self.tau1 if self.kernel_width is None else self.kernel_width

    def validate(self, prefix="solver"):
        for name in ("tau1", "tau2", "propagate_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{prefix}.{name}: must be positive")
        for name in ("stage1_iterations", "stage2_iterations"):
            if int(getattr(self, name)) < 1:
                raise ConfigInvalid(f"{prefix}.{name}: must be >= 1")
        if self.max_iters < 0:
            raise ConfigInvalid(f"{prefix}.max_iters: must be >= 0")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ConfigInvalid(f"{prefix}.kernel_width: must be positive")
        if self.match_statistic not in ("mean", "median"):
            raise ConfigInvalid(f"{prefix}.match_statistic: must be 'mean' or 'median'")
        return self

    @classmethod
    def from_dict(cls, d, prefix="solver"):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigInvalid(f"{prefix}: unknown keys {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(f"{prefix}: {exc}") from None
        return cfg.validate(prefix)

    def to_dict(self):
        return asdict(self)


@dataclass
class StageOneResult:
    keypoint_ids: np.ndarray  # (M,) model keypoint index of each retained point
    points: np.ndarray  # (M, 3) world points
    inlier_views: list  # per point, sorted view indices (global view numbering)
    score: float
    n_inliers: int
    best_pair: tuple = ()
    recovered: int = 0


@dataclass
class PoseEstimate:
    pose: Pose
    stage: str
    inlier_count_3d: int
    cost: float
    view_residuals: dict
    inlier_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    initial_cost: float | None = None
    iterations: int = 0
    stage1: StageOneResult | None = None
    aligned_pose: Pose | None = None


# --------------------------------------------------------------------------
# helpers


def _gather(assoc, observations):
    view_ids = sorted(assoc.members)
    insts = [observations[v][assoc.members[v]] for v in view_ids]
    pixels = np.stack([o.keypoints for o in insts])
    vis = np.stack([o.visibility for o in insts])
    return view_ids, pixels, vis


def huber(r, width):
    """Huber kernel of a non-negative residual norm."""
    r = np.asarray(r, dtype=float)
    return np.where(r <= width, 0.5 * r**2, width * (r - 0.5 * width))


def score_hypothesis(n_inliers, residual_sum):
    return n_inliers / (1.0 + residual_sum)


# --------------------------------------------------------------------------
# stage 1


def stage1_reconstruct(assoc, views, observations, tau1=2.0, iterations=64, rng_seed=0, recover_points=True):
    """RANSAC-scored dense triangulation of one associated instance.

    With ``recover_points`` a keypoint that is not supported by the winning
    view pair takes its inlier view set from the hypothesis in which it had
    the most inlier views (fewest residual pixels on ties).
    """
    view_ids, pixels, vis = _gather(assoc, observations)
    Va, N = vis.shape
    if Va < 2:
        raise InsufficientViews("association spans fewer than two views")
    if tau1 <= 0 or iterations < 1:
        raise ValueError("tau1 must be positive and iterations >= 1")
    P = np.stack([views[v].projection_matrix for v in view_ids])
    R3 = np.stack([views[v].rotation[2] for v in view_ids])
    t3 = np.array([views[v].translation[2] for v in view_ids])

    if Va == 2:
        pairs = np.array([[0, 1]])
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 1]))
        keys = rng.random((iterations, Va))
        pairs = np.sort(np.argsort(keys, axis=1)[:, :2], axis=1)

    best = None
    per_point_best_count = np.zeros(N, dtype=int)
    per_point_best_res = np.full(N, np.inf)
    per_point_best_inl = np.zeros((Va, N), dtype=bool)
    cache = {}
    for a, b in pairs:
        key = (int(a), int(b))
        if key not in cache:
            co = vis[a] & vis[b]
            sub = np.stack([co, co])
            X = triangulate_batch(pixels[[a, b]], sub, P[[a, b]])
            with np.errstate(invalid="ignore"):
                depth = X @ R3[[a, b]].T + t3[[a, b]]
            X[~np.all(depth > 1e-9, axis=1)] = np.nan
            err = reprojection_errors(np.nan_to_num(X), pixels, P)
            valid = ~np.isnan(X[:, 0])
            counted = vis & valid[None, :]
            inl = counted & (err < tau1)
            res_sum = float(err[counted].sum()) if counted.any() else 0.0
            n_inl = int(inl.sum())
            cache[key] = (inl, err, counted, n_inl, score_hypothesis(n_inl, res_sum))
        inl, err, counted, n_inl, score = cache[key]
        if best is None or score > best[1]:
            best = (key, score, n_inl, inl)
        if recover_points:
            cnt = inl.sum(axis=0)
            res = np.where(inl, err, 0.0).sum(axis=0)
            better = (cnt > per_point_best_count) | ((cnt == per_point_best_count) & (res < per_point_best_res) & (cnt > 0))
            per_point_best_count[better] = cnt[better]
            per_point_best_res[better] = res[better]
            per_point_best_inl[:, better] = inl[:, better]

    key, score, n_inl, inl = best
    if n_inl == 0:
        raise NoValidHypothesis("no view pair produced inliers", stage="stage1")
    inl = inl.copy()
    recovered = 0
    if recover_points:
        weak = inl.sum(axis=0) < 2
        take = weak & (per_point_best_count >= 2)
        inl[:, take] = per_point_best_inl[:, take]
        recovered = int(take.sum())

    keep = inl.sum(axis=0) >= 2
    X = triangulate_batch(pixels, inl, P)
    with np.errstate(invalid="ignore"):
        depth = np.where(inl, (X @ R3.T + t3).T, np.inf)
    keep &= ~np.isnan(X[:, 0]) & np.all(depth > 1e-9, axis=0)
    ids = np.flatnonzero(keep)
    vsets = [[view_ids[k] for k in np.flatnonzero(inl[:, i])] for i in ids]
    return StageOneResult(ids, X[ids], vsets, float(score), n_inl, (view_ids[key[0]], view_ids[key[1]]), recovered)


# --------------------------------------------------------------------------
# stage 2


def umeyama_align(source, target):
    """Least-squares rigid transform (unit scale) with ``target ~ R source + t``."""
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    if len(src) < 3:
        raise InsufficientPoints("Umeyama needs at least three point pairs")
    mu_s, mu_t = src.mean(axis=0), tgt.mean(axis=0)
    cs, ct = src - mu_s, tgt - mu_t
    sv = np.linalg.svd(cs, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateConfiguration("source points are collinear or coincident")
    U, _, Vt = np.linalg.svd(ct.T @ cs)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0])
    R = orthonormalize(U @ D @ Vt)
    return Pose(R, mu_t - R @ mu_s)


def _umeyama_batch(src, tgt):
    """Vectorised Umeyama for (H, k, 3) stacks; returns R (H,3,3), t (H,3), ok (H,)."""
    mu_s, mu_t = src.mean(axis=1), tgt.mean(axis=1)
    cs, ct = src - mu_s[:, None], tgt - mu_t[:, None]
    sv = np.linalg.svd(cs, compute_uv=False)
    ok = sv[:, 1] > 1e-6 * np.maximum(sv[:, 0], 1.0)
    U, _, Vt = np.linalg.svd(np.einsum("hki,hkj->hij", ct, cs))
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    d[d == 0] = 1.0
    U = U.copy()
    U[:, :, 2] *= d[:, None]
    R = U @ Vt
    t = mu_t - np.einsum("hij,hj->hi", R, mu_s)
    return R, t, ok


def stage2_align(stage1: StageOneResult, model_keypoints, tau2=5.0, iterations=256, rng_seed=0):
    """3-point RANSAC Umeyama between model keypoints and the reconstruction."""
    if tau2 <= 0:
        raise ValueError("tau2 must be positive")
    M = len(stage1.keypoint_ids)
    if M < 3:
        raise InsufficientPoints("fewer than three reconstructed points", stage="stage2")
    src = np.asarray(model_keypoints, dtype=float)[stage1.keypoint_ids]
    tgt = stage1.points
    # raise DegenerateConfiguration early for collinear clouds
    umeyama_align(src, tgt)

    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 2]))
    samples = np.argsort(rng.random((iterations, M)), axis=1)[:, :3]
    R, t, ok = _umeyama_batch(src[samples], tgt[samples])
    dist = np.linalg.norm(np.einsum("hij,mj->hmi", R, src) + t[:, None, :] - tgt[None], axis=2)
    inl = (dist < tau2) & ok[:, None]
    counts = inl.sum(axis=1)
    if counts.max() < 3:
        raise NoValidHypothesis("no 3-point hypothesis reached three inliers", stage="stage2")
    rms = np.sqrt(np.where(inl, dist**2, 0.0).sum(axis=1) / np.maximum(counts, 1))
    order = np.lexsort((np.arange(iterations), rms, -counts))
    best = order[0]
    mask = inl[best]
    pose = umeyama_align(src[mask], tgt[mask])
    return PoseEstimate(pose, "aligned", int(mask.sum()), float("nan"), {}, stage1.keypoint_ids[mask])


# --------------------------------------------------------------------------
# stage 3


def _residual_terms(estimate, stage1, assoc, views, observations, model_keypoints):
    """Stack the (keypoint, view) terms used by the refinement."""
    pos = {k: n for n, k in enumerate(stage1.keypoint_ids)}
    pts, obs, vidx = [], [], []
    for k in estimate.inlier_ids:
        for v in stage1.inlier_views[pos[int(k)]]:
            if v not in assoc.members:
                continue
            pts.append(model_keypoints[k])
            obs.append(observations[v][assoc.members[v]].keypoints[k])
            vidx.append(v)
    if not pts:
        raise NoResidualTerms("no (keypoint, view) term to refine", stage="stage3")
    return np.array(pts), np.array(obs), np.array(vidx)


def _project_terms(R, t, pts, vidx, Ks, Rs, ts):
    Xw = pts @ R.T + t
    Xc = np.einsum("nij,nj->ni", Rs[vidx], Xw) + ts[vidx]
    h = np.einsum("nij,nj->ni", Ks[vidx], Xc)
    return h, Xw


def reprojection_jacobian(view, pose: Pose, model_point):
    """Projected pixel and its 2x6 Jacobian w.r.t. ``(omega, dt)``.

    The perturbed pose is ``(exp(omega) R, t + dt)``.
    """
    Ks, Rs, ts = view.intrinsics[None], view.rotation[None], view.translation[None]
    pts = np.reshape(np.asarray(model_point, dtype=float), (1, 3))
    px, J = _jacobians(pose.rotation, pose.translation, pts, np.zeros(1, dtype=int), Ks, Rs, ts)
    return px[0], J[0]


def _jacobians(R, t, pts, vidx, Ks, Rs, ts):
    h, Xw = _project_terms(R, t, pts, vidx, Ks, Rs, ts)
    z = h[:, 2]
    px = h[:, :2] / z[:, None]
    n = len(pts)
    dpdh = np.zeros((n, 2, 3))
    dpdh[:, 0, 0] = 1 / z
    dpdh[:, 1, 1] = 1 / z
    dpdh[:, :, 2] = -px / z[:, None]
    A = dpdh @ Ks[vidx] @ Rs[vidx]  # d pixel / d world point
    RP = Xw - t
    skew_rp = np.zeros((n, 3, 3))
    skew_rp[:, 0, 1], skew_rp[:, 0, 2] = -RP[:, 2], RP[:, 1]
    skew_rp[:, 1, 0], skew_rp[:, 1, 2] = RP[:, 2], -RP[:, 0]
    skew_rp[:, 2, 0], skew_rp[:, 2, 1] = -RP[:, 1], RP[:, 0]
    J = np.concatenate([-A @ skew_rp, A], axis=2)
    return px, J


def _camera_stacks(views):
    return (
        np.stack([v.intrinsics for v in views]),
        np.stack([v.rotation for v in views]),
        np.stack([v.translation for v in views]),
    )


def robust_cost(pose: Pose, pts, obs, vidx, views, width):
    Ks, Rs, ts = _camera_stacks(views)
    h, _ = _project_terms(pose.rotation, pose.translation, pts, vidx, Ks, Rs, ts)
    if np.any(h[:, 2] <= 1e-9):
        return np.inf
    r = np.linalg.norm(h[:, :2] / h[:, 2:3] - obs, axis=1)
    return float(huber(r, width).sum())


def refine_pose(pose: Pose, pts, obs, vidx, views, width, max_iters=50, rtol=1e-10):
    """Huber-robust Levenberg-Marquardt on SE(3); returns (pose, cost, iterations).

    Each step solves the IRLS-weighted normal equations; a step is kept only
    if it lowers the robust cost.
    """
    Ks, Rs, ts = _camera_stacks(views)
    R, t = pose.rotation.copy(), pose.translation.copy()

    def cost_of(R_, t_):
        h, _ = _project_terms(R_, t_, pts, vidx, Ks, Rs, ts)
        if np.any(h[:, 2] <= 1e-9):
            return np.inf
        return float(huber(np.linalg.norm(h[:, :2] / h[:, 2:3] - obs, axis=1), width).sum())

    cost = cost_of(R, t)
    lam = 1e-3
    it = 0
    for it in range(1, max_iters + 1):
        px, J = _jacobians(R, t, pts, vidx, Ks, Rs, ts)
        e = px - obs
        r = np.linalg.norm(e, axis=1)
        w = np.where(r <= width, 1.0, width / np.maximum(r, 1e-300))
        H = np.einsum("n,nki,nkj->ij", w, J, J)
        g = np.einsum("n,nki,nk->i", w, J, e)
        if not np.any(g):
            it -= 1
            break
        accepted = False
        while lam < 1e12:
            A = H + lam * np.diag(np.diag(H) + 1e-12)
            try:
                dx = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R_new = orthonormalize(so3_exp(dx[:3]) @ R)
            t_new = t + dx[3:]
            c_new = cost_of(R_new, t_new)
            if c_new < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            break
        decrease = cost - c_new
        R, t, cost = R_new, t_new, c_new
        lam = max(lam / 10, 1e-12)
        if decrease <= rtol * max(cost + decrease, 1e-300):
            break
    return Pose(R, t), cost, it


def stage3_refine(initial: PoseEstimate, assoc, views, observations, stage1: StageOneResult, model_keypoints, kernel_width=2.0, max_iters=50):
    pts, obs, vidx = _residual_terms(initial, stage1, assoc, views, observations, np.asarray(model_keypoints, dtype=float))
    start_cost = robust_cost(initial.pose, pts, obs, vidx, views, kernel_width)
    pose, cost, iters = refine_pose(initial.pose, pts, obs, vidx, views, kernel_width, max_iters)
    return PoseEstimate(
        pose,
        "refined",
        initial.inlier_count_3d,
        cost,
        _view_residuals(pose, pts, obs, vidx, views),
        initial.inlier_ids,
        start_cost,
        iters,
    )


def _view_residuals(pose, pts, obs, vidx, views):
    Ks, Rs, ts = _camera_stacks(views)
    h, _ = _project_terms(pose.rotation, pose.translation, pts, vidx, Ks, Rs, ts)
    r = np.linalg.norm(h[:, :2] / h[:, 2:3] - obs, axis=1)
    return {int(v): float(r[vidx == v].mean()) for v in np.unique(vidx)}


# --------------------------------------------------------------------------
# pipeline


def estimate_pose(assoc, views, observations, model, config: SolverConfig | None = None):
    """Run the three stages on one association; errors carry the failing stage."""
    config = config or SolverConfig()
    keypoints = np.asarray(getattr(model, "keypoints", model), dtype=float)
    if len(assoc.members) < 2:
        raise InsufficientViews("association spans fewer than two views")
    try:
        s1 = stage1_reconstruct(
            assoc, views, observations, config.tau1, config.stage1_iterations, config.seed, config.recover_points
        )
    except SolverError as exc:
        exc.stage = exc.stage or "stage1"
        raise
    try:
        s2 = stage2_align(s1, keypoints, config.tau2, config.stage2_iterations, config.seed)
    except (SolverError, DegenerateConfiguration) as exc:
        exc.stage = getattr(exc, "stage", None) or "stage2"
        raise
    pts, obs, vidx = _residual_terms(s2, s1, assoc, views, observations, keypoints)
    width = config.huber_width
    s2.cost = robust_cost(s2.pose, pts, obs, vidx, views, width)
    s2.initial_cost = s2.cost
    s2.view_residuals = _view_residuals(s2.pose, pts, obs, vidx, views)
    s2.stage1 = s1
    s2.aligned_pose = s2.pose
    if not config.refine:
        return s2
    pose, cost, iters = refine_pose(s2.pose, pts, obs, vidx, views, width, config.max_iters)
    est = PoseEstimate(
        pose, "refined", s2.inlier_count_3d, cost, _view_residuals(pose, pts, obs, vidx, views), s2.inlier_ids, s2.cost, iters
    )
    est.stage1 = s1
    est.aligned_pose = s2.pose
    return est
