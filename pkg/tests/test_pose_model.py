import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aacn.pose_model import (LIMBS, NUM_KEYPOINTS, NUM_NONRIGID, NUM_PARTS, NUM_RIGID, InvalidPoseError,
                             PoseAnnotation, canonical_part_table, part_keypoints, part_names, read_poses,
                             validate_pose, write_poses)


def test_table_sizes():
    nonrigid, rigid = canonical_part_table()
    assert len(nonrigid) == NUM_NONRIGID == 11
    assert len(rigid) == NUM_RIGID == 3
    assert NUM_PARTS == 14


def test_rigid_sets():
    _, rigid = canonical_part_table()
    assert [set(r.keypoint_set) for r in rigid] == [{0, 1, 3}, {1, 3, 4, 7}, {4, 5, 7, 8}]


def test_ids_in_range_and_edges_unique():
    nonrigid, rigid = canonical_part_table()
    seen = set()
    for p in nonrigid:
        a, b = p.endpoints
        assert a != b
        assert 0 <= a < NUM_KEYPOINTS and 0 <= b < NUM_KEYPOINTS
        edge = frozenset(p.endpoints)
        assert edge not in seen
        seen.add(edge)
    for r in rigid:
        assert all(0 <= k < NUM_KEYPOINTS for k in r.keypoint_set)
    assert [p.part_id for p in nonrigid] == list(range(11))


def test_table_is_stable_copy():
    a, _ = canonical_part_table()
    a.pop()
    b, _ = canonical_part_table()
    assert len(b) == 11
    assert canonical_part_table() == canonical_part_table()


def test_names_and_keypoints():
    names = part_names()
    assert len(names) == 14 and len(set(names)) == 14
    assert part_keypoints(11) == (0, 1, 3)
    assert part_keypoints(0) == (0, 2)
    with pytest.raises(IndexError):
        part_keypoints(14)
    for limb, parts in LIMBS.items():
        assert len(parts) == 2


def test_clamp_to_bounds():
    pts = np.tile([5.0, 5.0], (14, 1))
    pts[0] = [-3, 5]
    out = validate_pose(PoseAnnotation(pts, np.ones(14, bool)), 10, 10)
    assert tuple(out.points[0]) == (0.0, 5.0)


def test_in_bounds_unchanged(pose):
    out = validate_pose(pose, 48, 96)
    np.testing.assert_array_equal(out.points, pose.points)
    assert out.absent_parts == frozenset()


def test_absent_part_flagged(pose):
    vis = np.ones(14, bool)
    vis[[0, 2]] = False
    out = validate_pose(pose.with_visibility(vis), 48, 96)
    assert 0 in out.absent_parts
    assert 11 not in out.absent_parts  # head-shoulder keeps its shoulders


def test_invisible_points_not_clamped():
    pts = np.full((14, 2), 4.0)
    pts[3] = [-50, 500]
    vis = np.ones(14, bool)
    vis[3] = False
    out = validate_pose(PoseAnnotation(pts, vis), 10, 10)
    assert tuple(out.points[3]) == (-50.0, 500.0)


def test_all_invisible_rejected(pose):
    with pytest.raises(InvalidPoseError):
        validate_pose(pose.with_visibility(np.zeros(14, bool)), 48, 96)


def test_bad_inputs(pose):
    with pytest.raises(ValueError):
        validate_pose(pose, 0, 10)
    with pytest.raises(InvalidPoseError):
        PoseAnnotation(np.full((14, 2), np.nan), np.ones(14, bool))
    with pytest.raises(InvalidPoseError):
        PoseAnnotation.from_triples([[0, 0, 1]] * 13)


def test_pose_is_immutable(pose):
    with pytest.raises(ValueError):
        pose.points[0, 0] = 1.0


@given(st.lists(st.tuples(st.floats(-100, 200), st.floats(-100, 200), st.booleans()),
                min_size=14, max_size=14))
def test_validate_keeps_visible_points_inside(triples):
    pose = PoseAnnotation.from_triples([[x, y, int(v)] for x, y, v in triples])
    if not pose.visible.any():
        with pytest.raises(InvalidPoseError):
            validate_pose(pose, 48, 96)
        return
    out = validate_pose(pose, 48, 96)
    p = out.points[out.visible]
    assert np.all((p[:, 0] >= 0) & (p[:, 0] <= 47) & (p[:, 1] >= 0) & (p[:, 1] <= 95))
    for i in out.absent_parts:
        assert not out.visible[list(part_keypoints(i))].any()


def test_jsonl_round_trip(tmp_path, pose):
    vis = np.ones(14, bool)
    vis[5] = False
    poses = {"a": pose, "b": pose.with_visibility(vis)}
    path = tmp_path / "poses.jsonl"
    write_poses(path, poses)
    line = json.loads(path.read_text().splitlines()[1])
    assert line["id"] == "b" and line["keypoints"][5][2] == 0
    back = read_poses(path)
    assert list(back) == ["a", "b"]
    np.testing.assert_array_equal(back["b"].points, pose.points)
    np.testing.assert_array_equal(back["b"].visible, vis)
