import pytest  # noqa: F401

import math

import numpy as np
from scipy.spatial.transform import Rotation

from taihri_kit.align import (
    AnchorCorrespondence,
    CoincidentPair,
    CollinearAnchors,
    RigidTransform,
    TooFewAnchors,
    align_with_anchors,
    anchor_ablation,
    anchor_residuals,
    apply_transform,
    kabsch,
)
from taihri_kit.joints import JOINT_NAMES, KeypointSet
from taihri_kit.utils import ConfigError, derive_rng

ANCHORS = ("left_shoulder", "right_shoulder", "left_hip")


def _random_rotation(rng):
    return Rotation.from_rotvec(rng.normal(size=3)).as_matrix()


def _corr(source, target):
    names = JOINT_NAMES[: len(source)]
    return AnchorCorrespondence(names, source, target)


def _random_pose(rng):
    return KeypointSet(
        JOINT_NAMES,
        rng.uniform(-500, 500, (len(JOINT_NAMES), 3)),
        np.ones(len(JOINT_NAMES), dtype=bool),
    )


def test_kabsch_examples():
    source = np.array([[0, 0, 0], [100, 0, 0], [0, 100, 0]], dtype=float)
    t = kabsch(_corr(source, source))
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0, atol=1e-9)
    assert t.scale == 1.0

    t = kabsch(_corr(source, source + [100, 0, 0]))
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, [100, 0, 0], atol=1e-9)


def test_kabsch_recovers_rigid_motion():
    rng = derive_rng(0)
    for i in range(1000):
        n = 3 if i % 10 == 0 else int(rng.integers(4, 9))
        source = rng.uniform(-500, 500, (n, 3))
        rotation = _random_rotation(rng)
        translation = rng.uniform(-2000, 2000, 3)
        target = source @ rotation.T + translation

        t = kabsch(_corr(source, target))
        assert np.abs(t.rotation - rotation).max() < 1e-6
        assert np.abs(t.translation - translation).max() < 1e-6
        assert np.isclose(np.linalg.det(t.rotation), 1.0)
        assert anchor_residuals(t, _corr(source, target)).max() < 1e-6


def test_kabsch_handles_reflection():
    # a mirrored target: the best proper rotation, never a reflection
    rng = derive_rng(1)
    source = rng.uniform(-500, 500, (6, 3))
    target = source * [-1, 1, 1]
    t = kabsch(_corr(source, target))
    assert np.linalg.det(t.rotation) == pytest.approx(1.0)


def test_kabsch_with_scale():
    rng = derive_rng(2)
    source = rng.uniform(-500, 500, (5, 3))
    rotation = _random_rotation(rng)
    target = 1.3 * source @ rotation.T + [10, 20, 1500]

    t = kabsch(_corr(source, target), with_scale=True)
    assert t.scale == pytest.approx(1.3, rel=1e-9)
    assert np.abs(t.rotation - rotation).max() < 1e-6
    assert np.abs(t.apply(source) - target).max() < 1e-6

    assert kabsch(_corr(source, target)).scale == 1.0


def test_kabsch_is_optimal():
    rng = derive_rng(3)
    for _ in range(200):
        source = rng.uniform(-500, 500, (5, 3))
        target = (
            source @ _random_rotation(rng).T
            + rng.uniform(-1000, 1000, 3)
            + rng.normal(size=(5, 3)) * 20
        )
        corr = _corr(source, target)
        t = kabsch(corr)
        best = np.sum((t.apply(source) - target) ** 2)

        nudge = Rotation.from_rotvec(
            rng.normal(size=3) / math.sqrt(3) * 1e-3
        ).as_matrix()
        rotation = nudge @ t.rotation
        other = RigidTransform(
            rotation, target.mean(axis=0) - rotation @ source.mean(axis=0)
        )
        assert np.sum((other.apply(source) - target) ** 2) >= best - 1e-9


def test_kabsch_errors():
    source = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    plane = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    with pytest.raises(CollinearAnchors, match="Source anchors"):
        kabsch(_corr(source, plane))
    with pytest.raises(CollinearAnchors, match="Target anchors"):
        kabsch(_corr(plane, source))
    with pytest.raises(CollinearAnchors):
        kabsch(_corr(np.zeros((3, 3)), plane))
    with pytest.raises(TooFewAnchors, match=">= 3 anchors, got 2"):
        kabsch(_corr(plane[:2], plane[:2]))


def test_single_anchor():
    corr = AnchorCorrespondence(("nose",), [[0, 0, 0]], [[0, 0, 2000]])
    t = align_with_anchors(corr)
    assert np.array_equal(t.rotation, np.eye(3))
    assert t.translation.tolist() == [0, 0, 2000]


def test_two_anchors():
    source = [[0, 0, 0], [100, 0, 0]]
    t = align_with_anchors(_corr(source, [[500, 0, 2000], [600, 0, 2000]]))
    assert np.array_equal(t.rotation, np.eye(3))
    assert np.allclose(t.translation, [500, 0, 2000])

    # antiparallel: a half turn
    t = align_with_anchors(_corr(source, [[600, 0, 2000], [500, 0, 2000]]))
    assert np.allclose(t.rotation @ [1, 0, 0], [-1, 0, 0], atol=1e-12)
    assert anchor_residuals(t, _corr(source, [[600, 0, 2000], [500, 0, 2000]])).max() < 1e-9

    rng = derive_rng(4)
    for _ in range(500):
        source = rng.uniform(-500, 500, (2, 3))
        target = source @ _random_rotation(rng).T + rng.uniform(-1000, 1000, 3)
        corr = _corr(source, target)
        t = align_with_anchors(corr)
        assert anchor_residuals(t, corr).max() < 1e-6
        # the smallest rotation: its axis is normal to both segments
        axis = Rotation.from_matrix(t.rotation).as_rotvec()
        assert abs(np.dot(axis, source[1] - source[0])) < 1e-6


def test_two_anchors_coincident():
    with pytest.raises(CoincidentPair, match="coincide"):
        align_with_anchors(_corr([[1, 2, 3], [1, 2, 3]], [[0, 0, 0], [1, 0, 0]]))
    with pytest.raises(CoincidentPair):
        align_with_anchors(_corr([[0, 0, 0], [1, 0, 0]], [[5, 5, 5], [5, 5, 5]]))


def test_anchor_correspondence():
    with pytest.raises(TooFewAnchors, match="at least one anchor"):
        AnchorCorrespondence((), [], [])
    with pytest.raises(ValueError, match="Duplicate anchor names"):
        AnchorCorrespondence(("nose", "nose"), np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="Unknown joint name"):
        AnchorCorrespondence(("tail",), np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError, match="finite"):
        AnchorCorrespondence(("nose",), [[np.nan, 0, 0]], [[0, 0, 0]])

    corr = AnchorCorrespondence.from_records(
        [
            {"name": "nose", "source_mm": [0, 0, 0], "target_mm": [1, 2, 3]},
            {"name": "left_eye", "source_mm": [0, 1, 0], "target_mm": [1, 3, 3]},
        ]
    )
    assert len(corr) == 2
    assert corr.subset(corr.names[1:]).target.tolist() == [[1, 3, 3]]
    with pytest.raises(ConfigError, match="Missing field.+target_mm"):
        AnchorCorrespondence.from_records([{"name": "nose", "source_mm": [0, 0, 0]}])
    with pytest.raises(ConfigError, match="Invalid anchors"):
        AnchorCorrespondence.from_records({"name": "nose"})
    with pytest.raises(ConfigError, match="Invalid source_mm"):
        AnchorCorrespondence.from_records(
            [{"name": "nose", "source_mm": "0,0,0", "target_mm": [0, 0, 0]}]
        )
    with pytest.raises(ConfigError, match="Invalid anchor coordinates"):
        AnchorCorrespondence.from_records(
            [{"name": "nose", "source_mm": [0, "a", 0], "target_mm": [0, 0, 0]}]
        )


def test_rigid_transform():
    with pytest.raises(ValueError, match="not orthonormal"):
        RigidTransform(2 * np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="determinant \\+1"):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError, match="scale must be positive"):
        RigidTransform(np.eye(3), np.zeros(3), 0.0)

    rng = derive_rng(5)
    t = RigidTransform(_random_rotation(rng), rng.uniform(-1000, 1000, 3), 1.1)
    again = RigidTransform.from_dict(t.to_dict())
    points = rng.uniform(-500, 500, (10, 3))
    assert np.array_equal(again.apply(points), t.apply(points))
    assert RigidTransform.from_dict(
        {"rotation": np.eye(3).tolist(), "translation_mm": [1, 2, 3]}
    ).scale == 1.0
    with pytest.raises(ConfigError, match="Missing field.+translation_mm"):
        RigidTransform.from_dict({"rotation": np.eye(3).tolist()})


def test_rigid_transform_isometry_and_inverse():
    rng = derive_rng(6)
    for _ in range(200):
        t = RigidTransform(_random_rotation(rng), rng.uniform(-2000, 2000, 3))
        points = rng.uniform(-2000, 2000, (8, 3))
        moved = t.apply(points)

        before = np.linalg.norm(points[:, None] - points[None], axis=-1)
        after = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
        assert np.abs(before - after).max() < 1e-9
        assert np.abs(t.inverse().apply(moved) - points).max() < 1e-9

    identity = RigidTransform.identity()
    assert np.array_equal(identity.apply(points), points)


def test_apply_transform_keeps_visibility():
    pose = KeypointSet.from_mapping(
        {"nose": [0, 0, 0], "left_wrist": [100, 0, 0]},
        visible={"left_wrist": False},
    )
    t = RigidTransform(np.eye(3), [0, 0, 2000])
    moved = apply_transform(t, pose)
    assert moved.names == pose.names
    assert moved.visible.tolist() == [True, False]
    assert moved["left_wrist"].tolist() == [100, 0, 2000]


def test_right_wrist_placement():
    rng = derive_rng(7)
    for _ in range(100):
        pose = _random_pose(rng)
        rotation = _random_rotation(rng)
        gt = pose.with_xyz(pose.xyz @ rotation.T + [0, 0, 2000])
        corr = AnchorCorrespondence.from_keypoints(pose, gt, ANCHORS)
        t = align_with_anchors(corr)
        placed = apply_transform(t, pose)
        assert np.linalg.norm(placed["right_wrist"] - gt["right_wrist"]) < 1e-3


def test_anchor_ablation():
    rng = derive_rng(8)
    pose = _random_pose(rng)
    rotation = Rotation.from_euler("y", 30, degrees=True).as_matrix()
    gt = pose.with_xyz(pose.xyz @ rotation.T + [100, -50, 2200])

    rows = anchor_ablation(pose, gt, gt, ANCHORS)
    assert [row.anchors for row in rows] == [
        (), ANCHORS[:1], ANCHORS[:2], ANCHORS
    ]
    # one anchor is exact at the anchor only
    assert rows[1].max_residual_mm < 1e-9
    # all three anchors place the whole rigid pose
    assert rows[3].error_mm < 1e-6
    assert rows[3].max_residual_mm < 1e-6
    assert rows[0].error_mm > rows[3].error_mm
    assert rows[3].to_dict()["anchors"] == list(ANCHORS)
