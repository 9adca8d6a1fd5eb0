import ast
import pathlib

import numpy as np
import pytest

from mvkp import oracle
from mvkp.errors import GridTooLarge
from mvkp.geometry import Pose, so3_exp
from mvkp.simulator import InstanceObservation, KeypointModel, SceneConfig, generate_scene

TINY = KeypointModel.builtin("bracket", 12)


def tiny_scene(seed, sigma=0.0):
    views, obs, truth = generate_scene(SceneConfig(view_count=3, instance_count=1, noise_sigma=sigma, rng_seed=seed), TINY)
    terms = [(v, row[0].keypoints, row[0].visibility) for v, row in enumerate(obs) if row]
    return views, terms, truth.canonical_poses[0]


class TestBruteForceMatch:
    def test_empty(self):
        assert oracle.brute_force_match([], [], np.eye(3)) == set()

    def test_single(self):
        a = InstanceObservation([[100.0, 200.0], [300.0, 50.0]], [1, 1], 0)
        b = InstanceObservation([[110.0, 190.0], [280.0, 70.0]], [1, 1], 1)
        F = np.array([[0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]]) / np.sqrt(2)
        assert oracle.brute_force_match([a], [b], F) == {(0, 0)}

    def test_no_covisible(self):
        a = InstanceObservation([[1.0, 2.0], [3.0, 4.0]], [1, 0], 0)
        b = InstanceObservation([[1.0, 2.0], [3.0, 4.0]], [0, 1], 1)
        assert oracle.brute_force_match([a], [b], np.eye(3)) == set()


class TestGridSearch:
    def test_truth_cell_wins(self):
        views, terms, gt = tiny_scene(0)
        start = Pose(so3_exp(np.radians([1.0, -0.5, 0.5])) @ gt.rotation, gt.translation + [1.0, -0.5, 0.5])
        res = oracle.grid_pose_search(terms, views, TINY, 0.5, 0.5, (1.5, 1.5), (start.rotation, start.translation))
        assert res.value < 1e-6
        assert np.abs(res.rotation - gt.rotation).max() < 1e-9
        assert np.abs(res.translation - gt.translation).max() < 1e-9

    def test_finer_grid_never_worse(self):
        views, terms, gt = tiny_scene(1, sigma=1.0)
        hint = (gt.rotation, gt.translation + 0.3)
        coarse = oracle.grid_pose_search(terms, views, TINY, 1.0, 1.0, (2.0, 2.0), hint, kernel_width=2.0)
        fine = oracle.grid_pose_search(terms, views, TINY, 0.5, 0.5, (2.0, 2.0), hint, kernel_width=2.0)
        assert fine.value <= coarse.value

    def test_too_large(self):
        views, terms, gt = tiny_scene(0)
        with pytest.raises(GridTooLarge):
            oracle.grid_pose_search(terms, views, TINY, 0.01, 0.01, (5, 5), (gt.rotation, gt.translation))

    def test_point_objective_matches_grid(self):
        views, terms, gt = tiny_scene(2, sigma=1.0)
        res = oracle.grid_pose_search(terms, views, TINY, 0.5, 0.5, (0.5, 0.5), (gt.rotation, gt.translation))
        assert oracle.pose_objective(res.rotation, res.translation, terms, views, TINY) == pytest.approx(res.value, rel=1e-12)


class TestFdGradient:
    def test_quadratic(self):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        b = np.array([0.5, -1.0])
        x = np.array([0.3, -0.7])
        g = oracle.fd_gradient(lambda z: z @ A @ z + b @ z, x)
        assert np.abs(g - (2 * A @ x + b)).max() < 1e-10

    def test_vector_valued_shape(self):
        g = oracle.fd_gradient(lambda z: np.array([z[0] * z[1], z[1]]), np.array([2.0, 3.0]))
        assert g.shape == (2, 2)
        assert np.allclose(g, [[3.0, 2.0], [0.0, 1.0]])

    def test_bad_step(self):
        with pytest.raises(ValueError):
            oracle.fd_gradient(lambda z: z.sum(), np.zeros(2), 0.0)


def test_oracle_is_independent():
    src = pathlib.Path(oracle.__file__).read_text()
    imported = set()
    for node in ast.walk(ast.parse(src)):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    checked = {"geometry", "matching", "solver", "attention", "symmetry", "metrics", "simulator"}
    assert not {m.split(".")[-1] for m in imported} & checked
