"""G-MPJPE evaluation in the camera frame, the body-part configurations and
the task registry mapping interaction instructions to joint sets.

G-MPJPE is the mean Euclidean joint error with no root alignment and no
rigid fitting. Per sample, visible joints of a configuration are averaged,
then samples are averaged; sums are correctly rounded so the report does
not depend on dataset order.
"""
from __future__ import annotations

import logging
import math
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    MutableMapping,
    Sequence,
    Tuple,
)

import numpy as np
from diot import OrderedDiot
from liquid import Liquid

from .camera import CameraIntrinsics
from .codec import DEFAULT_VOLUME, InteractionVolume, decode_voxels, encode_voxels
from .joints import (
    JOINT_NAMES,
    KeypointSet,
    MissingJoint,
    NoVisibleJoints,
    check_joint_name,
)
from .utils import (
    ConfigError,
    KitError,
    check_fields,
    check_types,
    max_workers,
)

logger = logging.getLogger(__name__)

# fields of a dataset JSONL record; predictions need only `id` and `joints`
SAMPLE_RECORD_FIELDS = (
    "id",
    "intrinsics",
    "joints",
    "pelvis_depth_mm",
    "seed",
    "noise_px",
)
SAMPLE_RECORD_KINDS = {
    "id": "integer|string",
    "intrinsics": "object",
    "joints": "list",
}


class IdMismatch(KitError):
    """Raised when predictions and ground truth cover different sample ids"""


class ExcludedSampleWarning(Warning):
    """Warned when samples without visible joints are left out of a config"""


@dataclass(frozen=True)
class PartConfig:
    name: str
    joints: Tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.joints:
            raise ValueError(f"Part config {self.name} has no joints")
        for joint in self.joints:
            check_joint_name(joint)


# CLI key -> config
PART_CONFIGS: MutableMapping[str, PartConfig] = {
    "upper": PartConfig(
        "Upper",
        ("left_shoulder", "right_shoulder", "left_elbow", "right_elbow"),
    ),
    "lower": PartConfig(
        "Lower",
        ("left_hip", "right_hip", "left_knee", "right_knee"),
    ),
    "l_upper": PartConfig(
        "L-Upper",
        ("left_shoulder", "left_elbow", "left_wrist"),
    ),
    "r_upper": PartConfig(
        "R-Upper",
        ("right_shoulder", "right_elbow", "right_wrist"),
    ),
}


def part_config(key: str) -> PartConfig:
    """Look up a config by CLI key (`l_upper`) or name (`L-Upper`)"""
    normalized = key.strip().lower().replace("-", "_")
    if normalized not in PART_CONFIGS:
        raise ValueError(
            f"Unknown part config: {key!r}\n"
            f"Expecting one of: {', '.join(PART_CONFIGS)}"
        )
    return PART_CONFIGS[normalized]


def _visible_distances(
    pred: KeypointSet,
    gt: KeypointSet,
    subset: Sequence[str],
) -> Dict[str, float]:
    out = {}
    for name in subset:
        if name not in gt:
            raise MissingJoint(name, "ground truth")
        if name not in pred:
            raise MissingJoint(name, "prediction")
        if gt.is_visible(name):
            out[name] = float(np.linalg.norm(pred[name] - gt[name]))
    return out


def gmpjpe(
    pred: KeypointSet,
    gt: KeypointSet,
    subset: Sequence[str] | None = None,
) -> float:
    """Mean camera-frame error (mm) over the visible subset joints.

    Args:
        pred: The predicted joints.
        gt: The ground truth; its visibility selects the joints counted.
        subset: The joints to evaluate, all of gt's by default.

    Raises:
        MissingJoint: When a subset joint is absent from either set.
        NoVisibleJoints: When no subset joint is visible.
    """
    subset = gt.names if subset is None else subset
    distances = _visible_distances(pred, gt, subset)
    if not distances:
        raise NoVisibleJoints(
            f"No visible joint among: {', '.join(subset)}"
        )
    return math.fsum(distances.values()) / len(distances)


@dataclass(frozen=True)
class TaskSpec:
    """An interaction task: instruction keywords and its target joints"""

    task_id: str
    keywords: Tuple[str, ...]
    joints: Tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.joints:
            raise ValueError(f"Task {self.task_id} has no target joints")
        for joint in self.joints:
            check_joint_name(joint)
        keywords = tuple(
            " ".join(kw.casefold().split()) for kw in self.keywords
        )
        if not all(keywords):
            raise ValueError(f"Task {self.task_id} has an empty keyword")
        object.__setattr__(self, "keywords", keywords)
        object.__setattr__(self, "joints", tuple(self.joints))


def _task(task_id: str, keywords: Sequence[str], joints: Sequence[str]):
    return task_id, TaskSpec(task_id, tuple(keywords), tuple(joints))


HEAD = ("nose", "left_eye", "right_eye")
LEGS = (
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

TASK_REGISTRY: MutableMapping[str, TaskSpec] = dict(
    [
        _task(
            "handshake",
            ("shake hands", "shake hand", "shaking hands", "handshake"),
            PART_CONFIGS["r_upper"].joints,
        ),
        _task(
            "handover",
            ("hand over", "handover", "pass the", "give"),
            PART_CONFIGS["r_upper"].joints,
        ),
        _task(
            "high_five",
            ("high five", "high-five"),
            PART_CONFIGS["r_upper"].joints,
        ),
        _task(
            "shoulder_massage",
            ("massage", "shoulder massage", "rub the shoulders"),
            PART_CONFIGS["upper"].joints,
        ),
        _task("hug", ("hug", "embrace"), PART_CONFIGS["upper"].joints),
        _task(
            "wheelchair_lift",
            ("lift", "wheelchair", "transfer"),
            ("left_shoulder", "right_shoulder", "left_hip", "right_hip"),
        ),
        _task(
            "stand_assist_left",
            ("stand from left", "stand up from the left", "stand from the left"),
            PART_CONFIGS["l_upper"].joints,
        ),
        _task(
            "stand_assist_right",
            (
                "stand from right",
                "stand up from the right",
                "stand from the right",
            ),
            PART_CONFIGS["r_upper"].joints,
        ),
        _task(
            "dress_left_arm",
            ("left sleeve", "left arm"),
            PART_CONFIGS["l_upper"].joints,
        ),
        _task(
            "walk_assist",
            ("walk", "walking", "take a step"),
            PART_CONFIGS["lower"].joints,
        ),
        _task("leg_support", ("lift leg", "lift the leg", "knee"), LEGS),
        _task("feed", ("feed", "spoon", "drink"), HEAD),
    ]
)


def register_task(
    spec: TaskSpec,
    registry: MutableMapping[str, TaskSpec] | None = None,
) -> TaskSpec:
    """Add or replace a task in the registry"""
    registry = TASK_REGISTRY if registry is None else registry
    registry[spec.task_id] = spec
    return spec


def unregister_task(
    task_id: str,
    registry: MutableMapping[str, TaskSpec] | None = None,
) -> None:
    registry = TASK_REGISTRY if registry is None else registry
    registry.pop(task_id, None)


@dataclass(frozen=True)
class TaskResolution:
    joints: Tuple[str, ...]
    resolved: bool
    task_id: str | None = None
    keyword: str | None = None


def resolve_task(
    instruction: str,
    registry: Mapping[str, TaskSpec] | None = None,
) -> TaskResolution:
    """Map an instruction to the joints the task attends to.

    Keywords match case-folded, whole words, longest keyword first; ties
    go to the task registered first. Unmatched instructions resolve to
    the full joint set with `resolved` False.
    """
    if not instruction or not instruction.strip():
        raise ValueError("Instruction must not be empty")
    registry = TASK_REGISTRY if registry is None else registry
    text = " ".join(instruction.casefold().split())

    candidates = [
        (-len(keyword), order, keyword, spec)
        for order, spec in enumerate(registry.values())
        for keyword in spec.keywords
    ]
    for _, _, keyword, spec in sorted(candidates, key=lambda c: c[:3]):
        if re.search(rf"(?<!\w){re.escape(keyword)}(?!\w)", text):
            return TaskResolution(spec.joints, True, spec.task_id, keyword)

    return TaskResolution(JOINT_NAMES, False)


@dataclass(frozen=True, eq=False)
class EvalSample:
    """One ground-truth record of a dataset.

    Attributes:
        sample_id: The record id.
        intrinsics: The camera.
        gt: Camera-frame ground-truth joints with visibility.
        uv: (N, 2) 2D observations, NaN where absent.
    """

    sample_id: Any
    intrinsics: CameraIntrinsics
    gt: KeypointSet
    uv: np.ndarray

    @classmethod
    def from_record(
        cls,
        record: Mapping[str, Any],
        intrinsics: CameraIntrinsics | None = None,
    ) -> "EvalSample":
        """Build from a dataset JSONL record.

        `intrinsics` is the camera of records that carry none.
        """
        required = ("id", "joints")
        if intrinsics is None:
            required += ("intrinsics",)
        check_fields(record, SAMPLE_RECORD_FIELDS, required, "dataset record")
        check_types(record, SAMPLE_RECORD_KINDS, "dataset record")
        joints = record["joints"]
        gt = KeypointSet.from_records(joints)
        try:
            uv = np.array(
                [
                    joint["uv_px"] if joint.get("uv_px") is not None
                    else [np.nan, np.nan]
                    for joint in joints
                ],
                dtype=float,
            ).reshape(len(joints), 2)
        except (TypeError, ValueError):
            raise ConfigError(
                f"\nInvalid uv_px in dataset record {record['id']!r}"
                "\nExpecting: two numbers or null per joint"
            ) from None
        return cls(
            sample_id=record["id"],
            intrinsics=(
                CameraIntrinsics.from_dict(record["intrinsics"])
                if "intrinsics" in record
                else intrinsics
            ),
            gt=gt,
            uv=uv,
        )


Predictor = Callable[[EvalSample], KeypointSet]


@dataclass(frozen=True)
class ConfigResult:
    name: str
    gmpjpe_mm: float | None
    samples: int
    excluded: int
    joints_evaluated: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gmpjpe_mm": self.gmpjpe_mm,
            "samples": self.samples,
            "excluded": self.excluded,
            "joints_evaluated": self.joints_evaluated,
        }


REPORT_TEMPLATE = """\
# G-MPJPE report

Samples: {{ sample_count }}

| Config | G-MPJPE (mm) | Samples | Excluded | Joints |
|--------|--------------|---------|----------|--------|
{% for row in rows %}| {{ row.name }} | {{ row.error }} | {{ row.samples }} \
| {{ row.excluded }} | {{ row.joints }} |
{% endfor %}
| Joint | Mean error (mm) |
|-------|-----------------|
{% for joint in joints %}| {{ joint.name }} | {{ joint.error }} |
{% endfor %}"""


@dataclass(frozen=True)
class EvalReport:
    """Per-config G-MPJPE, per-joint mean errors and counts"""

    configs: Mapping[str, ConfigResult]
    per_joint_mm: Mapping[str, float]
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "configs": {
                key: result.to_dict() for key, result in self.configs.items()
            },
            "per_joint_mm": dict(self.per_joint_mm),
        }

    def to_markdown(self) -> str:
        def fmt(value):
            return "n/a" if value is None else f"{value:.3f}"

        rows = [
            OrderedDiot(
                name=result.name,
                error=fmt(result.gmpjpe_mm),
                samples=result.samples,
                excluded=result.excluded,
                joints=result.joints_evaluated,
            )
            for result in self.configs.values()
        ]
        joints = [
            OrderedDiot(name=name, error=fmt(error))
            for name, error in self.per_joint_mm.items()
        ]
        return Liquid(REPORT_TEMPLATE, from_file=False).render(
            sample_count=self.sample_count,
            rows=rows,
            joints=joints,
        )


def run_benchmark(
    dataset: Iterable[EvalSample | Mapping[str, Any]],
    predictor: Predictor,
    configs: Sequence[PartConfig] | None = None,
) -> EvalReport:
    """Evaluate a predictor on a dataset for each part config.

    Samples without a visible joint in a config are left out of that
    config, counted, and warned about once.

    Args:
        dataset: Ground-truth samples or their JSONL records.
        predictor: Maps a sample to predicted camera-frame joints.
        configs: The part configs, all four by default.
    """
    configs = list(PART_CONFIGS.values()) if configs is None else list(configs)
    samples = [
        s if isinstance(s, EvalSample) else EvalSample.from_record(s)
        for s in dataset
    ]
    with ThreadPoolExecutor(max_workers=max_workers()) as executor:
        predictions = list(executor.map(predictor, samples))

    per_sample: Dict[str, List[float]] = {c.name: [] for c in configs}
    excluded: Dict[str, int] = {c.name: 0 for c in configs}
    evaluated: Dict[str, int] = {c.name: 0 for c in configs}
    joint_errors: Dict[str, List[float]] = {}
    for config in configs:
        for joint in config.joints:
            joint_errors.setdefault(joint, [])

    for sample, pred in zip(samples, predictions):
        for config in configs:
            distances = _visible_distances(pred, sample.gt, config.joints)
            if not distances:
                excluded[config.name] += 1
                continue
            per_sample[config.name].append(
                math.fsum(distances.values()) / len(distances)
            )
            evaluated[config.name] += len(distances)
        seen = {
            joint
            for config in configs
            for joint in config.joints
        }
        for joint, dist in _visible_distances(
            pred, sample.gt, sorted(seen)
        ).items():
            joint_errors[joint].append(dist)

    results = OrderedDiot(diot_nest=False)
    for key, config in zip(_config_keys(configs), configs):
        values = per_sample[config.name]
        result = ConfigResult(
            name=config.name,
            gmpjpe_mm=math.fsum(values) / len(values) if values else None,
            samples=len(values),
            excluded=excluded[config.name],
            joints_evaluated=evaluated[config.name],
        )
        results[key] = result
        logger.info(
            "%s: G-MPJPE %s mm over %d samples (%d excluded)",
            config.name,
            "n/a" if result.gmpjpe_mm is None else f"{result.gmpjpe_mm:.3f}",
            result.samples,
            result.excluded,
        )

    total_excluded = sum(excluded.values())
    if total_excluded:
        warnings.warn(
            f"{total_excluded} (sample, config) pair(s) had no visible "
            "joint and were excluded",
            ExcludedSampleWarning,
        )

    return EvalReport(
        configs=results,
        per_joint_mm={
            joint: math.fsum(errs) / len(errs)
            for joint, errs in joint_errors.items()
            if errs
        },
        sample_count=len(samples),
    )


def _config_keys(configs: Sequence[PartConfig]) -> List[str]:
    by_config = {config: key for key, config in PART_CONFIGS.items()}
    return [
        by_config.get(config, config.name.lower().replace("-", "_"))
        for config in configs
    ]


def identity_predictor(sample: EvalSample) -> KeypointSet:
    return sample.gt


def offset_predictor(offset_mm: Sequence[float]) -> Predictor:
    """Ground truth shifted by a constant camera-frame offset"""
    offset = np.asarray(offset_mm, dtype=float)

    def predict(sample: EvalSample) -> KeypointSet:
        return sample.gt.translate(offset)

    return predict


def codec_round_trip_predictor(
    vol: InteractionVolume = DEFAULT_VOLUME,
) -> Predictor:
    """Ground truth encoded to voxel tokens and decoded back; points
    outside the volume are clamped to its border cells"""

    def predict(sample: EvalSample) -> KeypointSet:
        tokens, _ = encode_voxels(sample.gt.xyz, vol, clamp=True)
        return sample.gt.with_xyz(decode_voxels(tokens, vol))

    return predict


def gt_surface_depth(
    surface_offset_mm: float = 20.0,
) -> Callable[[EvalSample], np.ndarray]:
    """Simulated depth sensor: the surface lies surface_offset_mm in front
    of every ground-truth joint"""

    def measure(sample: EvalSample) -> np.ndarray:
        return sample.gt.xyz[:, 2] - surface_offset_mm

    return measure


def depth_baseline_predictor(
    surface_depth: Callable[[EvalSample], np.ndarray],
    joint_offset_mm: float = 20.0,
) -> Predictor:
    """Geometry-only baseline: back-project the 2D joints at the measured
    surface depth pushed back by a fixed joint-to-surface offset.

    Joints without a 2D observation or a positive depth are placed at the
    origin and marked invisible.
    """

    def predict(sample: EvalSample) -> KeypointSet:
        k = sample.intrinsics
        depth = np.asarray(surface_depth(sample), dtype=float) + joint_offset_mm
        ok = np.isfinite(sample.uv).all(axis=1) & (depth > 0)
        xyz = np.zeros((len(sample.gt), 3))
        uv = sample.uv[ok]
        z = depth[ok]
        xyz[ok, 0] = (uv[:, 0] - k.cx) * z / k.fx
        xyz[ok, 1] = (uv[:, 1] - k.cy) * z / k.fy
        xyz[ok, 2] = z
        return KeypointSet(sample.gt.names, xyz, ok)

    return predict


@dataclass
class PredictionTable:
    """Predictions keyed by sample id"""

    by_id: Dict[Any, KeypointSet] = field(default_factory=dict)

    @classmethod
    def from_records(
        cls,
        records: Iterable[Mapping[str, Any]],
    ) -> "PredictionTable":
        table = cls()
        for record in records:
            check_fields(
                record, SAMPLE_RECORD_FIELDS, ("id", "joints"), "prediction record"
            )
            check_types(record, SAMPLE_RECORD_KINDS, "prediction record")
            if record["id"] in table.by_id:
                raise IdMismatch(f"\nDuplicate prediction id: {record['id']!r}")
            table.by_id[record["id"]] = KeypointSet.from_records(
                record["joints"]
            )
        return table

    def check_ids(self, gt_ids: Iterable[Any]) -> None:
        """Raise IdMismatch unless predictions cover exactly the given ids"""
        gt_ids = list(gt_ids)
        missing = [i for i in gt_ids if i not in self.by_id]
        extra = [i for i in self.by_id if i not in set(gt_ids)]
        if missing or extra:
            raise IdMismatch(
                f"\nPrediction ids do not match the dataset ids"
                f"\nMissing predictions: {missing[:10]}"
                f"\nUnknown prediction ids: {extra[:10]}"
            )

    def __call__(self, sample: EvalSample) -> KeypointSet:
        return self.by_id[sample.sample_id]
