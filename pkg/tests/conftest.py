import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvkp.geometry import CameraView, Pose, axis_angle, random_rotation
from mvkp.simulator import SceneConfig, look_at, ring_cameras

settings.register_profile("mvkp", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mvkp")

K_DEFAULT = np.array([[1400.0, 0, 639.5], [0, 1400.0, 511.5], [0, 0, 1]])


def make_rig(n_views, **kw):
    """Ring-rig views (first camera is the world frame) and the scene-to-world pose."""
    return ring_cameras(SceneConfig(view_count=n_views, **kw))


def random_view(rng, K=K_DEFAULT, target=None, dist=(300.0, 700.0)):
    """A camera at random position looking at ``target`` (world frame)."""
    target = np.zeros(3) if target is None else np.asarray(target, float)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    c = target + d * rng.uniform(*dist)
    up = np.cross(d, rng.normal(size=3))
    R, t = look_at(c, target, up / np.linalg.norm(up))
    return CameraView(K, R, t)


def random_pose(rng, spread=50.0):
    return Pose(random_rotation(rng), rng.uniform(-spread, spread, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture(scope="session")
def rig4():
    return make_rig(4)


def rot_z(deg):
    return axis_angle([0, 0, 1], np.deg2rad(deg))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def acceptance_verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append((number, line))
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
