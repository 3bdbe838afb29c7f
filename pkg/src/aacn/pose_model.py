"""Fixed 14-keypoint skeleton and the part tables derived from it.

Coordinates are continuous pixel positions, origin at the top-left corner,
x to the right and y downward.

Keypoint order::

    0 head_top       5 r_knee      10 r_elbow
    1 r_shoulder     6 r_ankle     11 r_wrist
    2 neck           7 l_hip       12 l_elbow
    3 l_shoulder     8 l_knee      13 l_wrist
    4 r_hip          9 l_ankle

The order is fixed so that the rigid keypoint sets {0,1,3}, {1,3,4,7} and
{4,5,7,8} cover head-shoulder, upper torso and lower torso.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import numpy as np

NUM_KEYPOINTS = 14
NUM_NONRIGID = 11
NUM_RIGID = 3
NUM_PARTS = NUM_NONRIGID + NUM_RIGID

KEYPOINT_NAMES = (
    "head_top", "r_shoulder", "neck", "l_shoulder", "r_hip", "r_knee",
    "r_ankle", "l_hip", "l_knee", "l_ankle", "r_elbow", "r_wrist",
    "l_elbow", "l_wrist",
)


@dataclass(frozen=True)
class NonRigidPartDef:
    part_id: int
    name: str
    endpoints: Tuple[int, int]


@dataclass(frozen=True)
class RigidPartDef:
    part_id: int
    name: str
    keypoint_set: frozenset


_NONRIGID = (
    NonRigidPartDef(0, "head_neck", (0, 2)),
    NonRigidPartDef(1, "r_neck_shoulder", (2, 1)),
    NonRigidPartDef(2, "l_neck_shoulder", (2, 3)),
    NonRigidPartDef(3, "r_upper_arm", (1, 10)),
    NonRigidPartDef(4, "r_lower_arm", (10, 11)),
    NonRigidPartDef(5, "l_upper_arm", (3, 12)),
    NonRigidPartDef(6, "l_lower_arm", (12, 13)),
    NonRigidPartDef(7, "r_upper_leg", (4, 5)),
    NonRigidPartDef(8, "r_lower_leg", (5, 6)),
    NonRigidPartDef(9, "l_upper_leg", (7, 8)),
    NonRigidPartDef(10, "l_lower_leg", (8, 9)),
)

_RIGID = (
    RigidPartDef(0, "head_shoulder", frozenset({0, 1, 3})),
    RigidPartDef(1, "upper_torso", frozenset({1, 3, 4, 7})),
    RigidPartDef(2, "lower_torso", frozenset({4, 5, 7, 8})),
)

# whole limbs as unions of non-rigid parts, used for localization studies
LIMBS = {
    "r_arm": (3, 4),
    "l_arm": (5, 6),
    "r_leg": (7, 8),
    "l_leg": (9, 10),
}


def canonical_part_table() -> Tuple[List[NonRigidPartDef], List[RigidPartDef]]:
    return list(_NONRIGID), list(_RIGID)


def part_names() -> List[str]:
    """Names of all 14 parts in composition order (non-rigid first)."""
    return [p.name for p in _NONRIGID] + [p.name for p in _RIGID]


def part_keypoints(index: int) -> Tuple[int, ...]:
    """Keypoints that define combined part ``index`` (0..13)."""
    if 0 <= index < NUM_NONRIGID:
        return tuple(_NONRIGID[index].endpoints)
    if NUM_NONRIGID <= index < NUM_PARTS:
        return tuple(sorted(_RIGID[index - NUM_NONRIGID].keypoint_set))
    raise IndexError(f"part index {index} out of range [0, {NUM_PARTS})")


class InvalidPoseError(ValueError):
    pass


@dataclass(frozen=True)
class PoseAnnotation:
    """14 keypoints in image pixels with per-keypoint visibility.

    ``absent_parts`` holds combined part indices (0..13) whose defining
    keypoints are all invisible; it is filled in by :func:`validate_pose`.
    """

    points: np.ndarray
    visible: np.ndarray
    absent_parts: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
        vis = np.asarray(self.visible, dtype=bool).reshape(NUM_KEYPOINTS)
        if not np.all(np.isfinite(pts)):
            raise InvalidPoseError("keypoint coordinates must be finite")
        pts.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "absent_parts", frozenset(self.absent_parts))

    @classmethod
    def from_triples(cls, triples: Iterable[Iterable[float]]) -> "PoseAnnotation":
        arr = np.asarray(list(triples), dtype=np.float64)
        if arr.shape != (NUM_KEYPOINTS, 3):
            raise InvalidPoseError(f"expected 14 [x, y, v] triples, got shape {arr.shape}")
        return cls(arr[:, :2], arr[:, 2] > 0)

    def to_triples(self) -> List[List[float]]:
        return [[float(x), float(y), int(v)] for (x, y), v in zip(self.points, self.visible)]

    def with_visibility(self, visible) -> "PoseAnnotation":
        return PoseAnnotation(self.points, visible)


def validate_pose(pose: PoseAnnotation, image_w: float, image_h: float) -> PoseAnnotation:
    """Clamp visible keypoints into the image and flag absent parts."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    if not pose.visible.any():
        raise InvalidPoseError("all 14 keypoints invisible; annotation unusable")
    pts = pose.points.copy()
    vis = pose.visible
    pts[vis, 0] = np.clip(pts[vis, 0], 0.0, image_w - 1)
    pts[vis, 1] = np.clip(pts[vis, 1], 0.0, image_h - 1)
    absent = {i for i in range(NUM_PARTS) if not vis[list(part_keypoints(i))].any()}
    return PoseAnnotation(pts, vis, frozenset(absent))


# -- pose annotation files (JSON lines) ------------------------------------

def read_poses(path) -> Dict[str, PoseAnnotation]:
    poses = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                poses[str(rec["id"])] = PoseAnnotation.from_triples(rec["keypoints"])
            except (KeyError, InvalidPoseError) as exc:
                raise InvalidPoseError(f"{path}:{lineno}: {exc}") from exc
    return poses


def write_poses(path, poses: Dict[str, PoseAnnotation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, pose in poses.items():
            fh.write(json.dumps({"id": sid, "keypoints": pose.to_triples()}) + "\n")
