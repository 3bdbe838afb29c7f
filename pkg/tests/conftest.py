import numpy as np
import pytest

from aacn.pose_model import NUM_KEYPOINTS, PoseAnnotation


def upright_pose(scale: float = 1.0, dx: float = 0.0, dy: float = 0.0) -> PoseAnnotation:
    """A hand-placed standing pose in a 48x96 frame."""
    pts = np.array([
        [24, 6], [16, 20], [24, 16], [32, 20], [19, 50], [18, 68], [18, 88],
        [29, 50], [30, 68], [30, 88], [12, 34], [10, 48], [36, 34], [38, 48],
    ], dtype=np.float64)
    return PoseAnnotation(pts * scale + [dx, dy], np.ones(NUM_KEYPOINTS, bool))


@pytest.fixture
def pose():
    return upright_pose()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
