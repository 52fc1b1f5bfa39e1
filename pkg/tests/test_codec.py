import pytest  # noqa: F401

import numpy as np

from taihri_kit.camera import DEFAULT_INTRINSICS, Pixel, Point3Cam, project
from taihri_kit.codec import (
    DEFAULT_VOLUME,
    ClampedCoordinateWarning,
    EmptySequence,
    InteractionVolume,
    MalformedRecordError,
    OutOfVolume,
    PredictionRecord,
    PredictionSequence,
    TokenOutOfRange,
    VoxelToken,
    decode_voxel,
    decode_voxels,
    encode_keypoints,
    encode_voxel,
    encode_voxels,
    parse_sequence,
    round_half_away,
    serialize_sequence,
)
from taihri_kit.joints import JOINT_NAMES, KeypointSet
from taihri_kit.utils import ConfigError, derive_rng

# volume-local coordinates equal camera coordinates
ZERO_ORIGIN = InteractionVolume(4000, 3000, 4000, (0, 0, 0))
UNIT_VOLUME = InteractionVolume(1000, 1000, 1000, (0, 0, 0))


def test_volume():
    vol = InteractionVolume.from_dict(DEFAULT_VOLUME.to_dict())
    assert vol == DEFAULT_VOLUME
    assert vol.extent.tolist() == [4000, 3000, 4000]
    assert vol.origin.tolist() == [-2000, -1500, 0]

    with pytest.raises(ValueError, match="width_mm must be positive"):
        InteractionVolume(0, 1, 1)
    with pytest.raises(ConfigError, match="Missing field.+origin_mm"):
        InteractionVolume.from_dict(
            {"width_mm": 1, "height_mm": 1, "depth_mm": 1}
        )
    with pytest.raises(ConfigError, match="Invalid depth_mm in volume"):
        InteractionVolume.from_dict(
            {"width_mm": 1, "height_mm": 1, "depth_mm": True, "origin_mm": [0, 0, 0]}
        )


def test_encode_voxel():
    assert encode_voxel(Point3Cam(2000, 0, 0), ZERO_ORIGIN).X == 500
    assert encode_voxel(Point3Cam(0, 0, 0), ZERO_ORIGIN) == (0, 0, 0)
    assert encode_voxel(Point3Cam(3999, 0, 0), ZERO_ORIGIN).X == 999

    with pytest.raises(OutOfVolume, match="z=4000") as exc:
        encode_voxel(Point3Cam(0, 0, 4000), ZERO_ORIGIN)
    assert exc.value.axis == "z"
    with pytest.raises(OutOfVolume) as exc:
        encode_voxel(Point3Cam(-2001, 0, 100))
    assert exc.value.axis == "x"

    # default volume: the camera center sits mid-volume in x and y
    assert encode_voxel(Point3Cam(0, 0, 2000)) == (500, 500, 500)


def test_encode_voxel_max_index_on_grid():
    grid = np.zeros((4000, 3))
    grid[:, 0] = np.arange(4000)
    tokens, clamped = encode_voxels(grid, ZERO_ORIGIN)
    assert tokens[:, 0].max() == 999
    assert not clamped.any()


def test_encode_voxel_clamp():
    with pytest.warns(ClampedCoordinateWarning):
        token = encode_voxel(Point3Cam(0, 0, 4000), ZERO_ORIGIN, clamp=True)
    assert token == (0, 0, 999)
    with pytest.warns(ClampedCoordinateWarning):
        token = encode_voxel(Point3Cam(-5, 0, 1), ZERO_ORIGIN, clamp=True)
    assert token.X == 0

    tokens, clamped = encode_voxels(
        [[0, 0, 4000], [10, 10, 10]], ZERO_ORIGIN, clamp=True
    )
    assert clamped.tolist() == [True, False]
    assert tokens[0].tolist() == [0, 0, 999]


def test_decode_voxel():
    assert decode_voxel(VoxelToken(500, 0, 0), ZERO_ORIGIN).x == 2002
    assert encode_voxel(Point3Cam(2002, 0, 0), ZERO_ORIGIN).X == 500
    assert decode_voxel(VoxelToken(0, 0, 0), UNIT_VOLUME) == (0.5, 0.5, 0.5)

    with pytest.raises(TokenOutOfRange, match="X=1000"):
        decode_voxel(VoxelToken(1000, 0, 0))
    with pytest.raises(TokenOutOfRange, match="Z=-1"):
        decode_voxel(VoxelToken(0, 0, -1))


def test_quantization_error_bound():
    rng = derive_rng(0)
    vol = DEFAULT_VOLUME
    points = vol.origin + rng.random((100_000, 3)) * vol.extent
    tokens, _ = encode_voxels(points, vol)
    error = np.abs(decode_voxels(tokens, vol) - points)

    assert (error.max(axis=0) <= vol.extent / 2000 + 1e-9).all()
    mean = error.mean(axis=0)
    expected = vol.extent / 4000
    assert (np.abs(mean - expected) <= 0.05 * expected).all()


def test_encode_monotonic():
    rng = derive_rng(1)
    vol = DEFAULT_VOLUME
    points = vol.origin + rng.random((10_000, 3)) * vol.extent
    for axis in range(3):
        order = np.argsort(points[:, axis])
        tokens, _ = encode_voxels(points[order], vol)
        assert (np.diff(tokens[:, axis]) >= 0).all()


def test_token_idempotence():
    rng = derive_rng(2)
    for vol in (DEFAULT_VOLUME, ZERO_ORIGIN, UNIT_VOLUME):
        tokens = rng.integers(0, 1000, (10_000, 3))
        again, clamped = encode_voxels(decode_voxels(tokens, vol), vol)
        assert (again == tokens).all()
        assert not clamped.any()


def test_round_half_away():
    assert round_half_away(2.5) == 3
    assert round_half_away(-2.5) == -3
    assert round_half_away(2.49) == 2
    assert round_half_away(0.0) == 0


def test_prediction_record():
    record = PredictionRecord("left_wrist", (320, 180), (500, 250, 125))
    assert str(record) == "left_wrist: (320,180) -> [500,250,125]"
    assert record.voxel == VoxelToken(500, 250, 125)
    assert record.in_frame(DEFAULT_INTRINSICS)
    assert not PredictionRecord(
        "nose", (1280, 0), (0, 0, 0)
    ).in_frame(DEFAULT_INTRINSICS)

    record = PredictionRecord.from_pixel(
        "nose", Pixel(10.5, -3.5), VoxelToken(1, 2, 3)
    )
    assert record.pixel == (11, -4)

    with pytest.raises(MalformedRecordError, match="Unknown joint name"):
        PredictionRecord("", (0, 0), (0, 0, 0))
    with pytest.raises(MalformedRecordError, match="Z out of range"):
        PredictionRecord("nose", (0, 0), (0, 0, 1000))
    with pytest.raises(MalformedRecordError, match="integer"):
        PredictionRecord("nose", (0.5, 0), (0, 0, 0))


def test_prediction_sequence():
    a = PredictionRecord("left_wrist", (320, 180), (500, 250, 125))
    b = PredictionRecord("right_wrist", (400, 200), (520, 250, 125))
    seq = PredictionSequence((a, b))
    assert serialize_sequence(seq) == (
        "left_wrist: (320,180) -> [500,250,125]\n"
        "right_wrist: (400,200) -> [520,250,125]"
    )
    assert seq.names == ("left_wrist", "right_wrist")
    assert seq.out_of_frame(DEFAULT_INTRINSICS) == []

    keypoints = seq.to_keypoints(ZERO_ORIGIN)
    assert keypoints["left_wrist"][0] == 2002

    with pytest.raises(MalformedRecordError, match="empty"):
        PredictionSequence(())
    with pytest.raises(MalformedRecordError, match="Duplicate"):
        PredictionSequence((a, a))


def test_parse_sequence():
    seq, diags = parse_sequence(
        "left_wrist: (320,180) -> [500,250,125]\n"
        "\n"
        "right_wrist: (320,180) -> [500,250,1250]\n"
        "right wrist: (1,2) -> [1,2,3]\n"
        "left_tail: (1,2) -> [1,2,3]\n"
        "left_wrist: (0,0) -> [0,0,0]\n"
        "nose: (-5,7) -> [1,2,3]\n"
    )
    assert seq.names == ("left_wrist", "nose")
    assert seq.records[0].pixel == (320, 180)
    assert seq.records[1].pixel == (-5, 7)
    assert [d.line for d in diags] == [3, 4, 5, 6]
    assert diags[0].reason == "Z out of range"
    assert diags[1].reason == "malformed line"
    assert diags[2].reason == "unknown joint name 'left_tail'"
    assert diags[3].reason == "duplicate joint name 'left_wrist' (first on line 1)"
    assert diags[0].to_dict()["text"].startswith("right_wrist")


def test_parse_sequence_reports_all_bad_axes():
    with pytest.raises(EmptySequence) as exc:
        parse_sequence("nose: (0,0) -> [1000,-1,0]")
    assert exc.value.diagnostics[0].reason == "X,Y out of range"


def test_parse_sequence_grammar_is_strict():
    for line in (
        "nose:(0,0) -> [1,2,3]",
        "nose: (0, 0) -> [1,2,3]",
        "nose: (0,0) -> [1,2,3] ",
        "nose: (0,0)->[1,2,3]",
        "Nose: (0,0) -> [1,2,3]",
        "nose: (0.5,0) -> [1,2,3]",
        # non-ASCII decimal digits
        "nose: (\u0661\u0662,3) -> [4,5,6]",
        "nose: (1,2) -> [\uff14,5,6]",
    ):
        with pytest.raises(EmptySequence) as exc:
            parse_sequence(line)
        assert exc.value.diagnostics[0].reason == "malformed line"


def test_parse_sequence_long_integers():
    seq, diags = parse_sequence(
        "nose: (123456789012,-98765432109) -> [1,2,3]\n"
        "left_eye: (0,0) -> [0000000000000000000000001,2,3]\n"
        "right_eye: (0,0) -> [100000000000000000000,2,3]"
    )
    assert seq.records[0].pixel == (123456789012, -98765432109)
    assert seq.records[1].voxel == (1, 2, 3)
    assert [d.reason for d in diags] == ["X out of range"]


def test_serialize_parse_round_trip_far_out_of_frame():
    # a joint just in front of the camera projects to a 10-digit u
    keypoints = KeypointSet.from_mapping({"left_wrist": [1900.0, 0.0, 0.001]})
    seq = encode_keypoints(keypoints, DEFAULT_INTRINSICS)
    u, _ = seq.records[0].pixel
    assert len(str(u)) >= 10

    parsed, diags = parse_sequence(serialize_sequence(seq))
    assert parsed == seq
    assert diags == []


def test_parse_sequence_empty():
    with pytest.raises(EmptySequence, match="No valid record"):
        parse_sequence("this is not a pose\nneither is this")
    with pytest.raises(EmptySequence) as exc:
        parse_sequence("")
    assert exc.value.diagnostics == []


def test_parse_sequence_total_on_random_bytes():
    rng = derive_rng(3)
    valid = b"nose: (1,2) -> [3,4,5]\n"
    for i in range(100_000):
        data = rng.bytes(int(rng.integers(0, 200)))
        if i % 2:
            data = data + b"\n" + valid
        try:
            seq, diags = parse_sequence(data)
        except EmptySequence as exc:
            assert isinstance(exc.diagnostics, list)
        else:
            assert 1 <= len(seq) <= len(JOINT_NAMES)
            assert all(d.line >= 1 for d in diags)


def _random_sequence(rng):
    count = int(rng.integers(1, len(JOINT_NAMES) + 1))
    names = rng.permutation(JOINT_NAMES)[:count]
    return PredictionSequence(
        tuple(
            PredictionRecord(
                str(name),
                tuple(int(v) for v in rng.integers(-5000, 5000, 2)),
                VoxelToken(*(int(t) for t in rng.integers(0, 1000, 3))),
            )
            for name in names
        )
    )


def test_serialize_parse_round_trip():
    rng = derive_rng(4)
    for _ in range(10_000):
        seq = _random_sequence(rng)
        parsed, diags = parse_sequence(serialize_sequence(seq))
        assert parsed == seq
        assert diags == []


def test_encode_keypoints():
    keypoints = KeypointSet.from_mapping(
        {"left_wrist": [100.0, -50.0, 1500.0], "nose": [0.0, 0.0, 2000.0]}
    )
    seq = encode_keypoints(keypoints, DEFAULT_INTRINSICS, names=["nose"])
    assert seq.names == ("nose",)
    assert str(seq.records[0]) == "nose: (640,360) -> [500,500,500]"

    seq = encode_keypoints(keypoints, DEFAULT_INTRINSICS)
    u, v = project(Point3Cam(100.0, -50.0, 1500.0), DEFAULT_INTRINSICS)
    assert seq.records[0].pixel == (round_half_away(u), round_half_away(v))
    decoded = seq.to_keypoints()
    assert np.abs(decoded.xyz - keypoints.xyz).max() <= 2.0

    far = KeypointSet.from_mapping({"nose": [0.0, 0.0, 5000.0]})
    with pytest.raises(OutOfVolume):
        encode_keypoints(far, DEFAULT_INTRINSICS)
