import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from onlinesplat.core import CameraFrame, GaussianMap, Intrinsics, Pose, quat_normalize  # noqa: E402


def random_map(rng, n, *, depth=(2.5, 4.5), spread=1.0, scale=(0.05, 0.3), opacity=(0.1, 0.8),
               beta=(0.6, 2.0), anchor=0):
    """Gaussians in front of an identity camera."""
    m = GaussianMap()
    m.keyframe_anchors[anchor] = Pose.identity()
    means = rng.uniform([-spread, -spread, depth[0]], [spread, spread, depth[1]], (n, 3))
    quats = quat_normalize(rng.normal(size=(n, 4)))
    betas = rng.uniform(*beta, n) if beta is not None else None
    m.add(means, rng.uniform(0, 1, (n, 3)), rng.uniform(*scale, (n, 3)), rng.uniform(*opacity, n), anchor,
          quats=quats, betas=betas)
    return m


def blank_frame(intr, pose=None, fid=0, depth=True):
    h, w = intr.height, intr.width
    return CameraFrame(fid, pose or Pose.identity(), intr, np.zeros((h, w, 3)), np.zeros((h, w)) if depth else None,
                       "keyframe" if depth else "non-keyframe")


def random_pose(rng, rot=np.pi, trans=2.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(-rot, rot)
    return Pose.exp(np.concatenate([rng.uniform(-trans, trans, 3), axis * ang]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intr32():
    return Intrinsics.from_fov(32, 32, 60.0)


_ACCEPTANCE_RAN = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE_RAN.append(report.nodeid)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not _ACCEPTANCE_RAN:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n} ({title}): {detail}")
        else:
            terminalreporter.write_line(f"FAIL criterion {n} ({title}): not run or errored before a verdict")
