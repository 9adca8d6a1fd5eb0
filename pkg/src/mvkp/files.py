"""JSON scene and results files.

Scene file (``schema = "mvkp.scene"``)::

    {"schema", "version", "units": {"length": "mm", "pixel": "px"},
     "config_hash", "seed", "config": {...},
     "model": {"shape", "keypoints", "symmetry", "diameter"},
     "scenes": [{"scene_id", "seed",
                 "cameras": [{"intrinsics", "rotation", "translation", "image_size"}],
                 "instances": [{"instance_id", "visibility_score"}],
                 "observations": [[{"keypoints": [[u, v], ...], "visibility": [0|1, ...],
                                    "instance_id"}, ...] per view],
                 "truth": {"poses": [...], "canonical_poses": [...],
                           "outliers": [[[keypoint index, ...] per instance] per view]}}]}

Results file (``schema = "mvkp.results"``)::

    {"schema", "version", "config_hash", "seed", "scene_sha256", "solver": {...},
     "scenes": [{"scene_id", "estimates": [{"association": {view: detection index},
                 "status": "ok" | "failed", "stage", "error",
                 "pose", "aligned_pose", "stage_tag", "inlier_count_3d",
                 "initial_cost", "cost", "iterations", "view_residuals",
                 "stage1": {"score", "n_inliers", "points", "recovered", "best_pair"}}]}]}

Solver timings go to a ``<results>.timing.json`` sidecar so the results file
itself is reproducible byte for byte.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import SceneInvalid, SchemaMismatch
from .geometry import CameraView, Pose
from .simulator import InstanceObservation

SCENE_SCHEMA = "mvkp.scene"
RESULTS_SCHEMA = "mvkp.results"
SCHEMA_VERSION = 1


def dump_json(obj, path):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def file_sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def check_header(doc, schema):
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        raise SchemaMismatch(f"expected a {schema!r} document, got {doc.get('schema') if isinstance(doc, dict) else type(doc)}")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"{schema} version {doc.get('version')} is not supported (want {SCHEMA_VERSION})")


# --------------------------------------------------------------------------
# scenes


def scene_to_dict(scene_id, seed, views, observations, truth):
    V = len(views)
    return {
        "scene_id": scene_id,
        "seed": seed,
        "cameras": [v.to_dict() for v in views],
        "instances": [
            {"instance_id": i, "visibility_score": float(s)} for i, s in enumerate(truth.visibility_score)
        ],
        "observations": [
            [
                {
                    "keypoints": o.keypoints.tolist(),
                    "visibility": o.visibility.astype(int).tolist(),
                    "instance_id": o.instance_id,
                }
                for o in observations[j]
            ]
            for j in range(V)
        ],
        "truth": {
            "poses": [p.to_dict() for p in truth.poses],
            "canonical_poses": [p.to_dict() for p in truth.canonical_poses],
            "outliers": [[np.flatnonzero(m).tolist() for m in truth.outliers[j]] for j in range(V)],
        },
    }


def scene_from_dict(d):
    """Return ``(views, observations, truth_dict)``; raises SceneInvalid on bad input."""
    try:
        views = [CameraView.from_dict(c) for c in d["cameras"]]
        obs = d["observations"]
        if len(obs) != len(views):
            raise SceneInvalid("observations must have one list per camera")
        observations = [
            [InstanceObservation(o["keypoints"], o["visibility"], j, o.get("instance_id")) for o in row]
            for j, row in enumerate(obs)
        ]
        truth = d.get("truth", {})
        poses = [Pose.from_dict(p) for p in truth.get("poses", [])]
        vis = [inst["visibility_score"] for inst in d.get("instances", [])]
    except SceneInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneInvalid(f"malformed scene {d.get('scene_id', '?') if isinstance(d, dict) else '?'}: {exc}") from None
    sizes = {len(o.keypoints) for row in observations for o in row}
    if len(sizes) > 1:
        raise SceneInvalid("detections disagree on the keypoint count")
    return views, observations, {"poses": poses, "visibility_score": vis}


# --------------------------------------------------------------------------
# results


def estimate_record(members, estimate=None, error=None):
    rec = {"association": {str(k): int(v) for k, v in sorted(members.items())}}
    if estimate is None:
        rec.update(status="failed", stage=getattr(error, "stage", None), error=f"{type(error).__name__}: {error}")
        return rec
    s1 = estimate.stage1
    rec.update(
        status="ok",
        pose=estimate.pose.to_dict(),
        aligned_pose=estimate.aligned_pose.to_dict() if estimate.aligned_pose is not None else None,
        stage_tag=estimate.stage,
        inlier_count_3d=int(estimate.inlier_count_3d),
        initial_cost=float(estimate.initial_cost),
        cost=float(estimate.cost),
        iterations=int(estimate.iterations),
        view_residuals={str(k): float(v) for k, v in sorted(estimate.view_residuals.items())},
        stage1={
            "score": float(s1.score),
            "n_inliers": int(s1.n_inliers),
            "points": int(len(s1.keypoint_ids)),
            "recovered": int(s1.recovered),
            "best_pair": [int(x) for x in s1.best_pair],
        },
    )
    return rec


def record_poses(scene_record, key="pose"):
    """Estimated poses of a results scene (None for failed associations)."""
    return [Pose.from_dict(e[key]) if e.get("status") == "ok" and e.get(key) else None for e in scene_record["estimates"]]
