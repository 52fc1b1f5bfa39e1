import pytest  # noqa: F401

import numpy as np

from taihri_kit.camera import DEFAULT_INTRINSICS
from taihri_kit.codec import DEFAULT_VOLUME, decode_voxels, encode_voxels
from taihri_kit.evaluate import (
    PART_CONFIGS,
    EvalSample,
    ExcludedSampleWarning,
    IdMismatch,
    PartConfig,
    PredictionTable,
    TaskSpec,
    codec_round_trip_predictor,
    depth_baseline_predictor,
    gmpjpe,
    gt_surface_depth,
    identity_predictor,
    offset_predictor,
    part_config,
    register_task,
    resolve_task,
    run_benchmark,
    unregister_task,
)
from taihri_kit.joints import JOINT_NAMES, KeypointSet, MissingJoint, NoVisibleJoints
from taihri_kit.synth import SynthConfig, generate_dataset
from taihri_kit.utils import ConfigError, derive_rng

FOUR = ("left_shoulder", "right_shoulder", "left_elbow", "right_elbow")


def _random_dataset(n, seed=0, hidden_fraction=0.0):
    """Ground truth uniformly inside the inner part of the default volume"""
    rng = derive_rng(seed)
    vol = DEFAULT_VOLUME
    samples = []
    for i in range(n):
        local = rng.uniform(0.05, 0.95, size=(len(JOINT_NAMES), 3))
        visible = rng.random(len(JOINT_NAMES)) >= hidden_fraction
        samples.append(
            EvalSample(
                sample_id=i,
                intrinsics=DEFAULT_INTRINSICS,
                gt=KeypointSet(
                    JOINT_NAMES, vol.origin + local * vol.extent, visible
                ),
                uv=np.full((len(JOINT_NAMES), 2), np.nan),
            )
        )
    return samples


def test_part_configs():
    assert part_config("upper").joints == FOUR
    assert part_config("L-Upper") is PART_CONFIGS["l_upper"]
    assert part_config("R-Upper").joints == (
        "right_shoulder", "right_elbow", "right_wrist"
    )
    assert [c.name for c in PART_CONFIGS.values()] == [
        "Upper", "Lower", "L-Upper", "R-Upper"
    ]
    with pytest.raises(ValueError, match="Unknown part config"):
        part_config("torso")
    with pytest.raises(ValueError, match="no joints"):
        PartConfig("Empty", ())


def test_gmpjpe():
    gt = KeypointSet.from_mapping({name: [0.0, 0.0, 1000.0] for name in FOUR})
    assert gmpjpe(gt, gt) == 0

    pred = gt.with_xyz(gt.xyz + np.array([[3, 4, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0]]))
    assert gmpjpe(pred, gt) == 1.25
    assert gmpjpe(pred, gt, ["left_shoulder"]) == 5

    partial = pred.subset(FOUR[1:])
    with pytest.raises(MissingJoint, match="left_shoulder.+prediction"):
        gmpjpe(partial, gt)
    with pytest.raises(MissingJoint, match="ground truth"):
        gmpjpe(gt, partial, FOUR)

    hidden = KeypointSet(gt.names, gt.xyz, [False, True, True, True])
    # the displaced joint is invisible and does not count
    assert gmpjpe(pred, hidden) == 0
    with pytest.raises(NoVisibleJoints):
        gmpjpe(pred, hidden, ["left_shoulder"])


def test_gmpjpe_translation_sensitivity():
    rng = derive_rng(1)
    for sample in _random_dataset(50, seed=2):
        t = rng.normal(size=3) * 100
        moved = sample.gt.translate(t)
        assert gmpjpe(moved, sample.gt) == pytest.approx(
            np.linalg.norm(t), rel=1e-12
        )


def test_resolve_task():
    res = resolve_task("Please shake hands with me")
    assert res.resolved
    assert res.task_id == "handshake"
    assert set(res.joints) == {"right_shoulder", "right_elbow", "right_wrist"}

    res = resolve_task("LIFT the person")
    assert res.resolved and res.keyword == "lift"

    # longest keyword first: "lift leg" beats "lift"
    assert resolve_task("lift leg onto the bed").task_id == "leg_support"
    assert resolve_task("assist the person to stand from left").joints == (
        PART_CONFIGS["l_upper"].joints
    )

    res = resolve_task("recite a poem")
    assert not res.resolved
    assert res.joints == JOINT_NAMES
    assert res.task_id is None

    res = resolve_task("shake hands", registry={})
    assert not res.resolved
    assert res.joints == JOINT_NAMES

    # whole words only
    assert resolve_task("the shipment is forgiven").task_id is None

    with pytest.raises(ValueError, match="must not be empty"):
        resolve_task("   ")


def test_register_task():
    registry = {}
    spec = register_task(
        TaskSpec("wave", ("Wave  Hello",), ("right_wrist",)), registry
    )
    assert spec.keywords == ("wave hello",)
    res = resolve_task("please WAVE hello", registry)
    assert res.task_id == "wave"
    assert res.joints == ("right_wrist",)

    unregister_task("wave", registry)
    assert not resolve_task("wave hello", registry).resolved
    unregister_task("wave", registry)

    with pytest.raises(ValueError, match="no target joints"):
        TaskSpec("none", ("x",), ())
    with pytest.raises(ValueError, match="Unknown joint name"):
        TaskSpec("bad", ("x",), ("tail",))


def test_run_benchmark_identity_and_offset():
    dataset = _random_dataset(30, seed=3)
    report = run_benchmark(dataset, identity_predictor)
    assert report.sample_count == 30
    assert list(report.configs) == ["upper", "lower", "l_upper", "r_upper"]
    for result in report.configs.values():
        assert result.gmpjpe_mm == 0
        assert result.samples == 30
        assert result.excluded == 0

    report = run_benchmark(dataset, offset_predictor([10, 0, 0]))
    for result in report.configs.values():
        assert result.gmpjpe_mm == pytest.approx(10, rel=1e-12)
    assert all(v == pytest.approx(10) for v in report.per_joint_mm.values())
    assert report.configs["upper"].joints_evaluated == 30 * 4


def test_run_benchmark_subset_consistency():
    dataset = _random_dataset(1, seed=4)
    rng = derive_rng(5)
    noise = rng.normal(size=(len(JOINT_NAMES), 3)) * 20

    def predictor(sample):
        return sample.gt.with_xyz(sample.gt.xyz + noise)

    report = run_benchmark(dataset, predictor, [PART_CONFIGS["upper"]])
    members = [report.per_joint_mm[name] for name in FOUR]
    assert report.configs["upper"].gmpjpe_mm == pytest.approx(np.mean(members))


def test_run_benchmark_codec_predictor():
    vol = DEFAULT_VOLUME
    dataset = _random_dataset(500, seed=6)
    report = run_benchmark(dataset, codec_round_trip_predictor(vol))

    # the measured round-trip quantization error, sample-then-average
    upper = PART_CONFIGS["upper"].joints
    measured = []
    for sample in dataset:
        xyz = sample.gt.subset(upper).xyz
        tokens, _ = encode_voxels(xyz, vol)
        measured.append(np.linalg.norm(decode_voxels(tokens, vol) - xyz, axis=1).mean())
    assert report.configs["upper"].gmpjpe_mm == pytest.approx(
        np.mean(measured), rel=1e-9
    )

    # and the codec's own statistics over uniform points
    rng = derive_rng(7)
    points = vol.origin + rng.random((100_000, 3)) * vol.extent
    tokens, _ = encode_voxels(points, vol)
    expected = np.linalg.norm(decode_voxels(tokens, vol) - points, axis=1).mean()
    for result in report.configs.values():
        assert abs(result.gmpjpe_mm - expected) <= 0.05 * expected


def test_run_benchmark_order_invariance():
    dataset = _random_dataset(40, seed=8, hidden_fraction=0.5)
    predictor = codec_round_trip_predictor()
    with pytest.warns(ExcludedSampleWarning):
        forward = run_benchmark(dataset, predictor)
    order = derive_rng(9).permutation(len(dataset))
    with pytest.warns(ExcludedSampleWarning):
        shuffled = run_benchmark([dataset[i] for i in order], predictor)
    assert forward.to_dict() == shuffled.to_dict()
    assert forward.to_markdown() == shuffled.to_markdown()


def test_run_benchmark_excludes_invisible_samples():
    dataset = _random_dataset(3, seed=10)
    hidden = dataset[0].gt
    visible = np.array([name not in FOUR for name in hidden.names])
    dataset[0] = EvalSample(0, DEFAULT_INTRINSICS,
                            KeypointSet(hidden.names, hidden.xyz, visible),
                            dataset[0].uv)

    with pytest.warns(ExcludedSampleWarning, match="1 \\(sample, config\\)"):
        report = run_benchmark(dataset, identity_predictor, [PART_CONFIGS["upper"]])
    result = report.configs["upper"]
    assert result.samples == 2
    assert result.excluded == 1


def test_run_benchmark_all_excluded():
    dataset = _random_dataset(2, seed=11, hidden_fraction=1.0)
    with pytest.warns(ExcludedSampleWarning):
        report = run_benchmark(dataset, identity_predictor)
    assert all(r.gmpjpe_mm is None for r in report.configs.values())
    assert report.per_joint_mm == {}
    assert "n/a" in report.to_markdown()


def test_report_markdown():
    report = run_benchmark(_random_dataset(5, seed=12), offset_predictor([0, 3, 4]))
    text = report.to_markdown()
    assert "| Config | G-MPJPE (mm) |" in text
    assert "| Upper | 5.000 | 5 | 0 | 20 |" in text
    assert "| L-Upper | 5.000 | 5 | 0 | 15 |" in text
    assert "| right_wrist | 5.000 |" in text
    assert "Samples: 5" in text

    data = report.to_dict()
    assert data["sample_count"] == 5
    assert data["configs"]["lower"]["name"] == "Lower"
    assert data["configs"]["lower"]["gmpjpe_mm"] == pytest.approx(5)


def test_eval_sample_from_record():
    samples, _ = generate_dataset(3, SynthConfig(), seed=1)
    for sample in samples:
        record = sample.to_record()
        parsed = EvalSample.from_record(record)
        assert parsed.sample_id == record["id"]
        assert (parsed.gt.visible == sample.visible).all()
        assert np.array_equal(parsed.uv, sample.uv, equal_nan=True)

    record = samples[0].to_record()
    bare = {key: value for key, value in record.items() if key != "intrinsics"}
    with pytest.raises(ConfigError, match="Missing field.+intrinsics"):
        EvalSample.from_record(bare)
    assert EvalSample.from_record(bare, DEFAULT_INTRINSICS).intrinsics == (
        DEFAULT_INTRINSICS
    )
    with pytest.raises(ConfigError, match="Invalid id"):
        EvalSample.from_record({**record, "id": 1.5})
    with pytest.raises(ConfigError, match="Invalid uv_px"):
        EvalSample.from_record(
            {**record, "joints": [{**record["joints"][0], "uv_px": [1, 2, 3]}]}
        )


def test_depth_baseline_predictor():
    samples, _ = generate_dataset(20, SynthConfig(), seed=2)
    dataset = [s.to_record() for s in samples]
    predictor = depth_baseline_predictor(gt_surface_depth(20.0), 20.0)

    report = run_benchmark(dataset, predictor)
    for result in report.configs.values():
        if result.gmpjpe_mm is not None:
            assert result.gmpjpe_mm < 1e-6

    # a wrong joint offset shows up as depth error
    biased = depth_baseline_predictor(gt_surface_depth(20.0), 70.0)
    sample = EvalSample.from_record(dataset[0])
    pred = biased(sample)
    ok = pred.visible & sample.gt.visible
    assert np.allclose(pred.xyz[ok, 2] - sample.gt.xyz[ok, 2], 50.0)


def test_prediction_table():
    gt = _random_dataset(3, seed=13)
    records = [
        {"id": s.sample_id, "joints": s.gt.to_records()} for s in gt
    ]
    table = PredictionTable.from_records(records)
    table.check_ids(s.sample_id for s in gt)
    report = run_benchmark(gt, table)
    assert all(r.gmpjpe_mm == 0 for r in report.configs.values())

    with pytest.raises(IdMismatch, match="Missing predictions: \\[3\\]"):
        table.check_ids([0, 1, 2, 3])
    with pytest.raises(IdMismatch, match="Unknown prediction ids: \\[2\\]"):
        table.check_ids([0, 1])
    with pytest.raises(IdMismatch, match="Duplicate prediction id"):
        PredictionTable.from_records(records + records[:1])
