"""Multi-view dense-keypoint 6D pose estimation.

Cross-view instance matching, a three-stage pose solver (RANSAC
triangulation, RANSAC Umeyama alignment, robust reprojection refinement),
symmetry-aware metrics and a synthetic scene simulator standing in for a
keypoint network.
"""
__version__ = "0.1.0"

from .geometry import CameraView, Pose, fundamental_from_cameras, project, sampson_distance
from .geometry import triangulate_multiview, triangulate_two_view
from .matching import associate, match_pair, mean_sampson, propagate_association, select_seed_pair
from .metrics import add_error, average_recall, pose_within, sym_add_error
from .simulator import KeypointModel, SceneConfig, fps_sample, generate_scene
from .solver import SolverConfig, estimate_pose, stage1_reconstruct, stage2_align, stage3_refine, umeyama_align
from .symmetry import SymmetryGroup, canonicalize, closest_symmetry, equivalent_poses
