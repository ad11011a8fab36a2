from __future__ import annotations

import numpy as np
import pytest

from groundplan.scene import CameraModel, CameraRig, look_at
from groundplan.tasks import builtin_suite


@pytest.fixture(scope="session")
def suite():
    return builtin_suite()


def small_camera(eye, target, role, resolution=96):
    rot, t = look_at(eye, target)
    f = float(resolution)
    return CameraModel(
        fx=f, fy=f, cx=resolution / 2.0, cy=resolution / 2.0,
        width=resolution, height=resolution,
        rotation=rot, translation=t, role=role,
    )


@pytest.fixture
def small_rig():
    """Two-camera rig at reduced resolution; keeps unit tests quick."""
    return CameraRig([
        small_camera((0.85, 0.0, 0.55), (0.0, 0.0, 0.05), "front"),
        small_camera((0.35, 0.65, 0.65), (0.0, 0.0, 0.05), "left_shoulder"),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
