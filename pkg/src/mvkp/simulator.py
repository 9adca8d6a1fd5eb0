"""Synthetic multi-view keypoint observations with ground truth.

This stands in for a trained dense-keypoint network: cameras sit on a ring
looking at the scene centre, object instances are dropped at random poses
and every keypoint is projected into every view, then corrupted with
Gaussian pixel noise, random occlusion and confident outliers.

Randomness comes from numpy's PCG64 ``Generator`` seeded through
``SeedSequence``; normals use its ziggurat sampler, so a seed reproduces a
scene bit for bit. Instance poses draw from a stream that does not depend on
the view or keypoint count, which makes ablations over those counts paired.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .errors import ConfigInvalid, TooFewPoints
from .geometry import CameraView, Pose, project_points, random_rotation
from .symmetry import SymmetryGroup, canonical_pose

# --------------------------------------------------------------------------
# keypoint models


def fps_indices(points, n, start_rule="farthest_from_centroid"):
    """Greedy farthest point sampling; returns indices in selection order.

    ``start_rule`` is ``"farthest_from_centroid"`` or an integer start index.
    Ties are broken by the smaller point index.
    """
    pts = np.asarray(points, dtype=float)
    if n > len(pts):
        raise TooFewPoints(f"cannot sample {n} of {len(pts)} points")
    if n <= 0:
        return np.zeros(0, dtype=int)
    if start_rule == "farthest_from_centroid":
        start = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    else:
        start = int(start_rule)
    idx = np.empty(n, dtype=int)
    idx[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(dist))
        idx[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return idx


def fps_sample(points, n, start_rule="farthest_from_centroid"):
    return np.asarray(points, dtype=float)[fps_indices(points, n, start_rule)]


def _box_surface(rng, lo, hi, n):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face % 3
    side = face // 3
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def _cylinder_surface(rng, radius, length, n, polygon=None):
    """Side and caps of a cylinder along z; ``polygon`` gives a regular prism."""
    theta = rng.random(n) * 2 * np.pi
    r = np.full(n, float(radius))
    cap = rng.random(n) < radius / (radius + length)
    r[cap] = radius * np.sqrt(rng.random(cap.sum()))
    if polygon:
        sector = 2 * np.pi / polygon
        local = (theta % sector) - sector / 2
        r = r * np.cos(sector / 2) / np.cos(local)
    z = rng.random(n) * length - length / 2
    z[cap] = np.where(rng.random(cap.sum()) < 0.5, -length / 2, length / 2)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _bracket(rng, n):
    a = _box_surface(rng, [0, 0, 0], [60, 40, 6], n // 2)
    b = _box_surface(rng, [0, 0, 6], [8, 40, 36], n // 4)
    c = _box_surface(rng, [40, 28, 6], [54, 36, 16], n - n // 2 - n // 4)
    return np.vstack([a, b, c])


def _tube(rng, n):
    return _cylinder_surface(rng, 9.0, 60.0, n)


def _hexnut(rng, n):
    return _cylinder_surface(rng, 18.0, 12.0, n, polygon=6)


def _connector(rng, n):
    a = _box_surface(rng, [-30, -12, -6], [30, 12, 6], n * 2 // 3)
    # one tab on each side keeps the 2-fold symmetry about z
    b = _box_surface(rng, [30, -5, -3], [40, 5, 3], (n - n * 2 // 3) // 2)
    c = _box_surface(rng, [-40, -5, -3], [-30, 5, 3], n - n * 2 // 3 - len(b))
    return np.vstack([a, b, c])


SHAPES = {
    "bracket": (_bracket, {}),
    "tube": (_tube, {"axis": [0, 0, 1], "revolution": True, "samples": 36}),
    "hexnut": (_hexnut, {"axis": [0, 0, 1], "order": 6}),
    "connector": (_connector, {"axis": [0, 0, 1], "order": 2}),
}


@dataclass(frozen=True, eq=False)
class KeypointModel:
    name: str
    model_points: np.ndarray
    keypoints: np.ndarray
    symmetry: SymmetryGroup
    diameter: float

    def __post_init__(self):
        if len(self.keypoints) < 4:
            raise TooFewPoints("a keypoint model needs at least 4 keypoints")
        if self.diameter <= 0:
            raise ConfigInvalid("model diameter must be positive")

    @property
    def n_keypoints(self):
        return len(self.keypoints)

    @classmethod
    def from_points(cls, name, model_points, n_keypoints, symmetry=None):
        pts = np.asarray(model_points, dtype=float)
        keypoints = fps_sample(pts, n_keypoints)
        hull = pts[ConvexHull(pts).vertices] if len(pts) > 4 else pts
        return cls(name, pts, keypoints, symmetry or SymmetryGroup.trivial(), float(pdist(hull).max()))

    @classmethod
    def builtin(cls, name, n_keypoints=256, n_points=4096, symmetric=True):
        """One of the built-in shapes, centred on its centroid.

        The CAD point set is sampled with a fixed seed so every call gives
        the same model.
        """
        if name not in SHAPES:
            raise ConfigInvalid(f"unknown object shape {name!r}; choose from {sorted(SHAPES)}")
        make, sym = SHAPES[name]
        pts = make(np.random.default_rng(1234), n_points)
        pts = pts - pts.mean(axis=0)
        if sym:
            # the symmetry axis passes through the origin of the model frame
            pts[:, :2] -= pts[:, :2].mean(axis=0)
        group = SymmetryGroup.from_config(sym) if symmetric else SymmetryGroup.trivial()
        return cls.from_points(name, pts, n_keypoints, group)


# --------------------------------------------------------------------------
# scenes


@dataclass
class SceneConfig:
    view_count: int = 4
    ring_radius: float = 400.0
    elevation_deg: float = 45.0
    arc_deg: float = 180.0
    image_size: tuple = (1280, 1024)
    focal_px: float = 1400.0
    instance_count: int = 3
    position_range: float = 60.0
    height_range: float = 20.0
    noise_sigma: float = 1.0
    outlier_ratio: float = 0.0
    occlusion_prob: float = 0.0
    rng_seed: int = 0
    object: str = "bracket"
    keypoints: int = 256
    label_mode: str = "canonical"

    def validate(self, prefix="simulator"):
        def bad(name, msg):
            raise ConfigInvalid(f"{prefix}.{name}: {msg}")

        if int(self.view_count) != self.view_count or self.view_count < 2:
            bad("view_count", f"must be an integer >= 2, got {self.view_count}")
        if self.instance_count < 1:
            bad("instance_count", "must be >= 1")
        if self.noise_sigma < 0:
            bad("noise_sigma", "must be >= 0")
        for name in ("outlier_ratio", "occlusion_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad(name, f"must lie in [0, 1], got {v}")
        if self.ring_radius <= 0:
            bad("ring_radius", "must be positive")
        if not 0 < self.arc_deg <= 360:
            bad("arc_deg", "must lie in (0, 360]")
        if not 0 < self.elevation_deg < 90:
            bad("elevation_deg", "must lie in (0, 90)")
        if self.focal_px <= 0:
            bad("focal_px", "must be positive")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            bad("image_size", "must be [width, height] with positive entries")
        if self.keypoints < 4:
            bad("keypoints", "must be >= 4")
        if self.object not in SHAPES:
            bad("object", f"unknown shape {self.object!r}")
        if self.label_mode not in ("canonical", "ambiguous"):
            bad("label_mode", "must be 'canonical' or 'ambiguous'")
        return self

    @classmethod
    def from_dict(cls, d, prefix="simulator"):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"{prefix}: unknown keys {sorted(unknown)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(f"{prefix}: {exc}") from None
        return cfg.validate(prefix)

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass(eq=False)
class InstanceObservation:
    """Dense keypoint prediction for one detected instance in one view."""

    keypoints: np.ndarray
    visibility: np.ndarray
    view_index: int
    instance_id: int | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if len(self.keypoints) != len(self.visibility):
            raise ConfigInvalid("keypoints and visibility lengths differ")


@dataclass(eq=False)
class SceneTruth:
    poses: list
    canonical_poses: list
    projections: np.ndarray  # (V, I, N, 2)
    visibility: np.ndarray  # (V, I, N) bool
    outliers: np.ndarray  # (V, I, N) bool
    visibility_score: np.ndarray  # (I,)
    label_poses: list = field(default_factory=list)  # (V, I) poses the observations were drawn from


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation for a camera at ``center``."""
    center = np.asarray(center, dtype=float)
    fwd = np.asarray(target, dtype=float) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center


def ring_cameras(cfg: SceneConfig):
    """Cameras spread over ``arc_deg`` of a ring, expressed relative to the first one.

    Azimuths are ``arc_deg * k / view_count``, so a 360 degree arc is an
    evenly spaced full ring and smaller arcs never put two cameras face to face.

    Returns the views and the scene-to-world pose (world = first camera).
    """
    w, h = cfg.image_size
    K = np.array([[cfg.focal_px, 0, (w - 1) / 2], [0, cfg.focal_px, (h - 1) / 2], [0, 0, 1.0]])
    elev = np.deg2rad(cfg.elevation_deg)
    height = cfg.ring_radius * np.tan(elev)
    raw = []
    for k in range(cfg.view_count):
        phi = np.deg2rad(cfg.arc_deg) * k / cfg.view_count
        c = np.array([cfg.ring_radius * np.cos(phi), cfg.ring_radius * np.sin(phi), height])
        raw.append(look_at(c, np.zeros(3)))
    R1, t1 = raw[0]
    views = []
    for j, (Rj, tj) in enumerate(raw):
        if j == 0:
            Rr, tr = np.eye(3), np.zeros(3)
        else:
            Rr = Rj @ R1.T
            tr = tj - Rr @ t1
        views.append(CameraView(K, Rr, tr, (w, h)))
    return views, Pose(R1, t1)


def _sample_poses(cfg, model, rng):
    poses = []
    centers = []
    attempts = 0
    while len(poses) < cfg.instance_count:
        attempts += 1
        if attempts > 10000:
            raise ConfigInvalid("simulator: cannot place instances without overlap; enlarge position_range")
        R = random_rotation(rng)
        c = np.array(
            [
                rng.uniform(-cfg.position_range, cfg.position_range),
                rng.uniform(-cfg.position_range, cfg.position_range),
                rng.uniform(0.0, cfg.height_range),
            ]
        )
        if any(np.linalg.norm(c - o) < 0.5 * model.diameter for o in centers):
            continue
        centers.append(c)
        poses.append((R, c))
    return poses


def generate_scene(config: SceneConfig, model: KeypointModel):
    """Return ``(views, observations, truth)`` for one seeded scene.

    ``observations[v]`` lists the instances detected in view ``v`` in a
    shuffled order; an instance with no visible keypoint is not detected.
    """
    config.validate()
    pose_rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 0]))
    obs_rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 1]))

    views, scene_to_world = ring_cameras(config)
    poses = []
    for R, c in _sample_poses(config, model, pose_rng):
        p = scene_to_world.compose(Pose(R, c))
        poses.append(p)
    canon = [canonical_pose(p, model.symmetry) for p in poses]

    V, I, N = len(views), len(poses), model.n_keypoints
    proj = np.zeros((V, I, N, 2))
    vis = np.zeros((V, I, N), dtype=bool)
    out = np.zeros((V, I, N), dtype=bool)
    label_poses = []
    observations = []
    for j, view in enumerate(views):
        row = []
        view_labels = []
        for i in range(I):
            if config.label_mode == "canonical" or len(model.symmetry) == 1:
                label = canon[i]
            else:
                k = int(obs_rng.integers(len(model.symmetry)))
                label = Pose(poses[i].rotation @ model.symmetry.elements[k], poses[i].translation)
            view_labels.append(label)
            px, depth = project_points(view, label, model.keypoints, check_depth=False)
            in_img = (depth > 1e-9) & view.in_image(px)
            proj[j, i] = np.where(in_img[:, None], px, 0.0)
            occluded = obs_rng.random(N) < config.occlusion_prob
            vis[j, i] = in_img & ~occluded
            noise = obs_rng.standard_normal((N, 2)) * config.noise_sigma
            is_out = vis[j, i] & (obs_rng.random(N) < config.outlier_ratio)
            w, h = view.image_size
            uniform = obs_rng.random((N, 2)) * np.array([w - 1, h - 1])
            kp = np.where(is_out[:, None], uniform, proj[j, i] + noise)
            out[j, i] = is_out
            if vis[j, i].any():
                row.append(InstanceObservation(kp, vis[j, i].copy(), j, i))
        order = obs_rng.permutation(len(row))
        observations.append([row[k] for k in order])
        label_poses.append(view_labels)

    score = vis.mean(axis=(0, 2)) if N else np.zeros(I)
    truth = SceneTruth(poses, canon, proj, vis, out, score, label_poses)
    return views, observations, truth
