"""Synthetic close-range scenes: articulated stick figures in front of a
virtual camera, projected to 2D with frustum visibility, with noisy
annotations screened by a reprojection-error filter.

Body-local frame: pelvis (the hip midpoint) at the origin, +x towards the
subject's left side, +y down, +z away from the camera when the subject
faces it. The zero-angle pose is a T-pose.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np
from scipy import stats
from scipy.spatial.transform import Rotation

from .camera import DEFAULT_INTRINSICS, CameraIntrinsics, in_frustum, project_points
from .joints import JOINT_NAMES, KeypointSet, NoVisibleJoints
from .utils import (
    KitError,
    check_fields,
    check_types,
    derive_rng,
    derive_seed,
    max_workers,
)

logger = logging.getLogger(__name__)

SYNTH_FIELDS = (
    "bone_lengths_mm",
    "joint_angle_limit_deg",
    "distance_range_mm",
    "yaw_range_deg",
    "pitch_range_deg",
    "body_yaw_range_deg",
    "intrinsics",
    "noise_px",
    "threshold_px",
    "min_visible_fraction",
    "max_mean_depth_mm",
    "max_retries",
    "max_attempts_per_sample",
)
SYNTH_KINDS = {
    "bone_lengths_mm": "object",
    "joint_angle_limit_deg": "number",
    "distance_range_mm": "list",
    "yaw_range_deg": "list",
    "pitch_range_deg": "list",
    "body_yaw_range_deg": "list",
    "intrinsics": "object",
    "noise_px": "number",
    "threshold_px": "number",
    "min_visible_fraction": "number",
    "max_mean_depth_mm": "number|null",
    "max_retries": "integer",
    "max_attempts_per_sample": "integer",
}

# segment -> the bones sharing its length, left before right
SEGMENTS: Dict[str, Tuple[Tuple[str, str], ...]] = {
    "eye": (("nose", "left_eye"), ("nose", "right_eye")),
    "ear": (("left_eye", "left_ear"), ("right_eye", "right_ear")),
    "neck": (("nose", "left_shoulder"), ("nose", "right_shoulder")),
    "torso": (("left_shoulder", "left_hip"), ("right_shoulder", "right_hip")),
    "upper_arm": (
        ("left_shoulder", "left_elbow"),
        ("right_shoulder", "right_elbow"),
    ),
    "forearm": (("left_elbow", "left_wrist"), ("right_elbow", "right_wrist")),
    "thigh": (("left_hip", "left_knee"), ("right_hip", "right_knee")),
    "shin": (("left_knee", "left_ankle"), ("right_knee", "right_ankle")),
}
BONE_SEGMENT = {bone: seg for seg, bones in SEGMENTS.items() for bone in bones}

DEFAULT_BONE_LENGTHS_MM: Dict[str, Tuple[float, float]] = {
    "eye": (30.0, 40.0),
    "ear": (50.0, 70.0),
    "neck": (200.0, 260.0),
    "torso": (450.0, 550.0),
    "upper_arm": (260.0, 320.0),
    "forearm": (230.0, 280.0),
    "thigh": (380.0, 450.0),
    "shin": (360.0, 430.0),
}


def _unit(*xyz: float) -> np.ndarray:
    vec = np.array(xyz, dtype=float)
    return vec / np.linalg.norm(vec)


# Rest directions of the rigid head and torso bones, built from the nose
TORSO_REST = {
    ("nose", "left_eye"): _unit(0.6, -0.8, 0.0),
    ("nose", "right_eye"): _unit(-0.6, -0.8, 0.0),
    ("left_eye", "left_ear"): _unit(0.8, 0.0, 0.6),
    ("right_eye", "right_ear"): _unit(-0.8, 0.0, 0.6),
    ("nose", "left_shoulder"): _unit(0.67, 0.74, 0.0),
    ("nose", "right_shoulder"): _unit(-0.67, 0.74, 0.0),
    ("left_shoulder", "left_hip"): _unit(-0.16, 1.0, 0.0),
    ("right_shoulder", "right_hip"): _unit(0.16, 1.0, 0.0),
}
# Articulated limbs: (upper bone, lower bone), rest directions of a T-pose
LIMBS = (
    (("left_shoulder", "left_elbow"), ("left_elbow", "left_wrist"), (1, 0, 0)),
    (
        ("right_shoulder", "right_elbow"),
        ("right_elbow", "right_wrist"),
        (-1, 0, 0),
    ),
    (("left_hip", "left_knee"), ("left_knee", "left_ankle"), (0, 1, 0)),
    (("right_hip", "right_knee"), ("right_knee", "right_ankle"), (0, 1, 0)),
)
LIMB_BONES = tuple(bone for limb in LIMBS for bone in limb[:2])
MC_CHUNK = 100_000


class DegenerateConfig(KitError):
    """Raised when the configuration cannot produce acceptable scenes"""


def _check_range(name: str, value: Any, low: float = -math.inf) -> tuple:
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ValueError(f"Invalid {name}: {value!r}, expecting two numbers") from None
    if not (low <= lo <= hi) or not math.isfinite(hi):
        raise ValueError(f"Invalid {name}: {value}, expecting {low} <= lo <= hi")
    return lo, hi


@dataclass(frozen=True)
class SynthConfig:
    """Scene sampling and acceptance settings.

    Attributes:
        bone_lengths_mm: Segment name to the (min, max) length a subject
            draws from; missing segments keep their defaults.
        joint_angle_limit_deg: Limb joints rotate by Euler angles drawn
            from [-limit, limit] per axis; 0 gives the T-pose.
        distance_range_mm: Range of the pelvis depth.
        yaw_range_deg: Horizontal angle of the pelvis off the optical axis.
        pitch_range_deg: Vertical angle of the pelvis off the optical axis.
        body_yaw_range_deg: Rotation of the subject about its vertical axis.
        intrinsics: The camera.
        noise_px: Std of the Gaussian annotation noise on visible joints.
        threshold_px: Reprojection filter threshold (strict).
        min_visible_fraction: Visibility gate on the fraction of joints
            inside the frustum.
        max_mean_depth_mm: Gate on the mean joint depth, None to disable.
        max_retries: Scene draws before giving up on a visible subject.
        max_attempts_per_sample: Dataset generation gives up after this
            many attempts per requested sample.
    """

    bone_lengths_mm: Mapping[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_BONE_LENGTHS_MM)
    )
    joint_angle_limit_deg: float = 45.0
    distance_range_mm: Tuple[float, float] = (500.0, 3000.0)
    yaw_range_deg: Tuple[float, float] = (-20.0, 20.0)
    pitch_range_deg: Tuple[float, float] = (-15.0, 15.0)
    body_yaw_range_deg: Tuple[float, float] = (-180.0, 180.0)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    noise_px: float = 0.0
    threshold_px: float = 15.0
    min_visible_fraction: float = 0.4
    max_mean_depth_mm: float | None = 3000.0
    max_retries: int = 100
    max_attempts_per_sample: int = 1000

    def __post_init__(self) -> None:
        lengths = dict(DEFAULT_BONE_LENGTHS_MM)
        for segment, value in dict(self.bone_lengths_mm).items():
            if segment not in SEGMENTS:
                raise ValueError(
                    f"Unknown segment: {segment!r}\n"
                    f"Expecting one of: {', '.join(SEGMENTS)}"
                )
            lo, hi = _check_range(f"bone length of {segment}", value)
            if lo <= 0:
                raise ValueError(f"Bone length of {segment} must be positive")
            lengths[segment] = (lo, hi)
        object.__setattr__(self, "bone_lengths_mm", lengths)

        lo, _ = _check_range("distance_range_mm", self.distance_range_mm)
        if lo <= 0:
            raise ValueError("distance_range_mm must be positive")
        for name in ("distance_range_mm", "yaw_range_deg", "pitch_range_deg",
                     "body_yaw_range_deg"):
            object.__setattr__(
                self, name, _check_range(name, getattr(self, name))
            )
        for name in ("yaw_range_deg", "pitch_range_deg"):
            lo, hi = getattr(self, name)
            if lo <= -90 or hi >= 90:
                raise ValueError(f"{name} must lie within (-90, 90)")

        if not self.joint_angle_limit_deg >= 0:
            raise ValueError("joint_angle_limit_deg must be >= 0")
        if not self.noise_px >= 0:
            raise ValueError(f"noise_px must be >= 0, got {self.noise_px}")
        if not self.threshold_px > 0:
            raise ValueError("threshold_px must be positive")
        if not 0 <= self.min_visible_fraction <= 1:
            raise ValueError("min_visible_fraction must be in [0, 1]")
        if self.max_retries < 1 or self.max_attempts_per_sample < 1:
            raise ValueError("max_retries and max_attempts_per_sample must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthConfig":
        check_fields(data, SYNTH_FIELDS, where="synth config")
        check_types(data, SYNTH_KINDS, "synth config")
        data = dict(data)
        if "bone_lengths_mm" in data:
            check_fields(
                data["bone_lengths_mm"], SEGMENTS, where="bone_lengths_mm"
            )
            check_types(
                data["bone_lengths_mm"],
                dict.fromkeys(SEGMENTS, "list"),
                "bone_lengths_mm",
            )
        if "intrinsics" in data:
            data["intrinsics"] = CameraIntrinsics.from_dict(data["intrinsics"])
        for name in ("distance_range_mm", "yaw_range_deg", "pitch_range_deg",
                     "body_yaw_range_deg"):
            if name in data:
                data[name] = tuple(data[name])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bone_lengths_mm"] = {
            seg: list(rng) for seg, rng in self.bone_lengths_mm.items()
        }
        out["intrinsics"] = self.intrinsics.to_dict()
        for name in ("distance_range_mm", "yaw_range_deg", "pitch_range_deg",
                     "body_yaw_range_deg"):
            out[name] = list(out[name])
        return out


DEFAULT_SYNTH = SynthConfig()


@dataclass(frozen=True, eq=False)
class SkeletonPose:
    """A stick figure in the body-local frame.

    Attributes:
        keypoints: The 17 joints, pelvis at the origin.
        segment_lengths: Segment name to bone length in mm.
        limb_angles_deg: (8, 3) Euler angles of the limb bones, in
            LIMB_BONES order.
    """

    keypoints: KeypointSet
    segment_lengths: Mapping[str, float]
    limb_angles_deg: np.ndarray

    def bone_length(self, parent: str, child: str) -> float:
        """The configured length of a bone"""
        return self.segment_lengths[BONE_SEGMENT[(parent, child)]]


def build_skeleton(
    segment_lengths: Mapping[str, float],
    limb_angles_deg: np.ndarray | None = None,
) -> SkeletonPose:
    """Pose a stick figure from segment lengths and limb angles.

    The head and torso are a rigid block; every limb bone rotates by its
    Euler angles relative to its parent bone.
    """
    missing = [seg for seg in SEGMENTS if seg not in segment_lengths]
    if missing:
        raise ValueError(f"Missing segment length(s): {', '.join(missing)}")
    if limb_angles_deg is None:
        limb_angles_deg = np.zeros((len(LIMB_BONES), 3))
    limb_angles_deg = np.asarray(limb_angles_deg, dtype=float).reshape(
        len(LIMB_BONES), 3
    )

    def length(bone):
        return float(segment_lengths[BONE_SEGMENT[bone]])

    pos = {"nose": np.zeros(3)}
    for (parent, child), direction in TORSO_REST.items():
        pos[child] = pos[parent] + length((parent, child)) * direction

    rotations = Rotation.from_euler(
        "xyz", limb_angles_deg, degrees=True
    ).as_matrix()
    for i, (upper, lower, rest) in enumerate(LIMBS):
        rest = np.asarray(rest, dtype=float)
        rot_upper = rotations[2 * i]
        rot_lower = rot_upper @ rotations[2 * i + 1]
        pos[upper[1]] = pos[upper[0]] + length(upper) * (rot_upper @ rest)
        pos[lower[1]] = pos[lower[0]] + length(lower) * (rot_lower @ rest)

    xyz = np.array([pos[name] for name in JOINT_NAMES])
    pelvis = 0.5 * (pos["left_hip"] + pos["right_hip"])
    return SkeletonPose(
        keypoints=KeypointSet(
            JOINT_NAMES, xyz - pelvis, np.ones(len(JOINT_NAMES), dtype=bool)
        ),
        segment_lengths={seg: float(segment_lengths[seg]) for seg in SEGMENTS},
        limb_angles_deg=limb_angles_deg,
    )


def sample_skeleton(rng: np.random.Generator, cfg: SynthConfig) -> SkeletonPose:
    """Draw a subject: segment lengths, then limb angles"""
    lengths = {
        seg: float(rng.uniform(*cfg.bone_lengths_mm[seg])) for seg in SEGMENTS
    }
    limit = cfg.joint_angle_limit_deg
    angles = rng.uniform(-limit, limit, size=(len(LIMB_BONES), 3))
    return build_skeleton(lengths, angles)


@dataclass(frozen=True, eq=False)
class SceneSample:
    """A subject placed in front of the camera, with its 2D annotations.

    Attributes:
        pose: The body-local skeleton.
        intrinsics: The camera.
        keypoints_3d: Camera-frame joints; visibility is the frustum test.
        uv: (17, 2) annotated pixels; exact projections plus annotation
            noise on visible joints, NaN for joints behind the camera.
        camera_distance_mm: The pelvis depth.
        sample_id: Index of the sample in its dataset.
        seed: Seed of the sample, noise included.
        noise_px: Std of the annotation noise applied.
    """

    pose: SkeletonPose
    intrinsics: CameraIntrinsics
    keypoints_3d: KeypointSet
    uv: np.ndarray
    camera_distance_mm: float
    sample_id: int = 0
    seed: int = 0
    noise_px: float = 0.0

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints_3d.visible

    def projected_uv(self) -> np.ndarray:
        """Exact projections of the 3D joints"""
        uv, _ = project_points(self.keypoints_3d.xyz, self.intrinsics)
        return uv

    def with_uv(self, uv: np.ndarray, noise_px: float | None = None) -> "SceneSample":
        uv = np.array(uv, dtype=float).reshape(len(self.keypoints_3d), 2)
        uv.setflags(write=False)
        return replace(
            self,
            uv=uv,
            noise_px=self.noise_px if noise_px is None else noise_px,
        )

    def to_record(self) -> dict:
        joints = []
        for i, joint in enumerate(self.keypoints_3d.to_records()):
            uv = self.uv[i]
            joint["uv_px"] = (
                None if np.isnan(uv).any() else [float(uv[0]), float(uv[1])]
            )
            joints.append(
                {key: joint[key] for key in ("name", "xyz_mm", "uv_px", "visible")}
            )
        return {
            "id": self.sample_id,
            "intrinsics": self.intrinsics.to_dict(),
            "joints": joints,
            "pelvis_depth_mm": self.camera_distance_mm,
            "seed": self.seed,
            "noise_px": self.noise_px,
        }


def place_skeleton(
    pose: SkeletonPose,
    pelvis: np.ndarray,
    body_yaw_deg: float,
    k: CameraIntrinsics,
    sample_id: int = 0,
    seed: int = 0,
) -> SceneSample:
    """Turn the subject about its vertical axis and put its pelvis at the
    given camera-frame position"""
    rot = Rotation.from_euler("y", body_yaw_deg, degrees=True).as_matrix()
    xyz = pose.keypoints.xyz @ rot.T + np.asarray(pelvis, dtype=float)
    visible = in_frustum(xyz, k)
    keypoints = KeypointSet(JOINT_NAMES, xyz, visible)
    uv, _ = project_points(xyz, k)
    uv.setflags(write=False)
    return SceneSample(
        pose=pose,
        intrinsics=k,
        keypoints_3d=keypoints,
        uv=uv,
        camera_distance_mm=float(pelvis[2]),
        sample_id=sample_id,
        seed=seed,
    )


def sample_scene(
    rng: np.random.Generator,
    cfg: SynthConfig = DEFAULT_SYNTH,
    sample_id: int = 0,
    seed: int = 0,
) -> SceneSample:
    """Draw a subject and a camera placement with at least one joint visible.

    The pelvis depth is uniform in the distance range; yaw and pitch set
    the direction of the pelvis off the optical axis.

    Raises:
        DegenerateConfig: When max_retries draws leave every joint outside
            the frustum.
    """
    for _ in range(cfg.max_retries):
        pose = sample_skeleton(rng, cfg)
        depth = rng.uniform(*cfg.distance_range_mm)
        yaw = math.radians(rng.uniform(*cfg.yaw_range_deg))
        pitch = math.radians(rng.uniform(*cfg.pitch_range_deg))
        body_yaw = rng.uniform(*cfg.body_yaw_range_deg)
        pelvis = np.array(
            [depth * math.tan(yaw), depth * math.tan(pitch), depth]
        )
        sample = place_skeleton(
            pose, pelvis, body_yaw, cfg.intrinsics, sample_id, seed
        )
        if sample.visible.any():
            return sample

    raise DegenerateConfig(
        f"\nNo joint visible after {cfg.max_retries} scene draws"
        "\nExpecting: camera orientation limits that keep the subject "
        "in view"
    )


def perturb_annotations(
    sample: SceneSample,
    noise_px: float,
    rng: np.random.Generator,
) -> SceneSample:
    """Add isotropic Gaussian pixel noise to the visible joints.

    One (visible, 2) normal draw, in joint order. Invisible joints and the
    3D joints are untouched.
    """
    if not noise_px >= 0:
        raise ValueError(f"noise_px must be >= 0, got {noise_px}")
    if noise_px == 0:
        return sample

    visible = sample.visible
    uv = np.array(sample.uv)
    uv[visible] += rng.normal(0.0, noise_px, size=(int(visible.sum()), 2))
    return sample.with_uv(uv, noise_px=noise_px)


def reprojection_filter(
    sample: SceneSample,
    threshold_px: float = 15.0,
) -> Tuple[bool, float]:
    """Compare the annotations with the projected 3D joints.

    Returns:
        Whether the max error over visible joints is strictly below the
        threshold, and that max error in pixels.

    Raises:
        NoVisibleJoints: When no joint is visible.
    """
    visible = sample.visible
    if not visible.any():
        raise NoVisibleJoints("Reprojection filter needs a visible joint")
    errors = np.linalg.norm(
        sample.uv[visible] - sample.projected_uv()[visible], axis=1
    )
    max_error = float(errors.max())
    return max_error < threshold_px, max_error


@dataclass
class AcceptanceStats:
    attempted: int = 0
    accepted: int = 0
    rejected_by_visibility: int = 0
    rejected_by_depth: int = 0
    rejected_by_filter: int = 0

    @property
    def filter_rejection_rate(self) -> float:
        """Filter rejections among the attempts that reached the filter"""
        reached = self.accepted + self.rejected_by_filter
        return self.rejected_by_filter / reached if reached else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _attempt(
    index: int,
    seed: int,
    cfg: SynthConfig,
) -> Tuple[str, SceneSample]:
    sample_seed = derive_seed(seed, index)
    sample = sample_scene(derive_rng(sample_seed, 0), cfg, seed=sample_seed)

    if sample.visible.mean() < cfg.min_visible_fraction:
        return "visibility", sample
    if (
        cfg.max_mean_depth_mm is not None
        and sample.keypoints_3d.xyz[:, 2].mean() > cfg.max_mean_depth_mm
    ):
        return "depth", sample

    sample = perturb_annotations(
        sample, cfg.noise_px, derive_rng(sample_seed, 1)
    )
    passed, _ = reprojection_filter(sample, cfg.threshold_px)
    return ("accepted" if passed else "filter"), sample


def generate_dataset(
    n: int,
    cfg: SynthConfig = DEFAULT_SYNTH,
    seed: int = 0,
) -> Tuple[List[SceneSample], AcceptanceStats]:
    """Generate exactly n accepted samples.

    Attempt i draws from streams derived from (seed, i) and attempts are
    consumed in index order, so the output and the statistics depend on
    the seed only, not on the number of worker threads.

    Raises:
        ValueError: When n < 1.
        DegenerateConfig: When acceptance is too low to reach n samples.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    stats_ = AcceptanceStats()
    samples: List[SceneSample] = []
    max_attempts = n * cfg.max_attempts_per_sample
    workers = max_workers()

    with ThreadPoolExecutor(max_workers=workers) as executor:
        next_index = 0
        while len(samples) < n:
            if next_index >= max_attempts:
                raise DegenerateConfig(
                    f"\nOnly {len(samples)} of {n} samples accepted "
                    f"after {max_attempts} attempts: {stats_.to_dict()}"
                    "\nExpecting: gates and filter that accept samples"
                )
            chunk = range(
                next_index,
                min(max_attempts, next_index + max(2 * (n - len(samples)), 4 * workers)),
            )
            next_index = chunk.stop
            results = executor.map(lambda i: _attempt(i, seed, cfg), chunk)
            for outcome, sample in results:
                if len(samples) == n:
                    break
                stats_.attempted += 1
                if outcome == "accepted":
                    stats_.accepted += 1
                    samples.append(replace(sample, sample_id=len(samples)))
                else:
                    name = f"rejected_by_{outcome}"
                    setattr(stats_, name, getattr(stats_, name) + 1)

    logger.info(
        "Generated %d samples in %d attempts "
        "(rejected: visibility %d, depth %d, filter %d)",
        n,
        stats_.attempted,
        stats_.rejected_by_visibility,
        stats_.rejected_by_depth,
        stats_.rejected_by_filter,
    )
    return samples, stats_


def rejection_probability(
    num_visible: int,
    noise_px: float,
    threshold_px: float = 15.0,
) -> float:
    """Probability that the max of num_visible Rayleigh(noise_px) pixel
    errors reaches the threshold"""
    if noise_px == 0:
        return 0.0
    return float(
        1.0 - stats.rayleigh.cdf(threshold_px, scale=noise_px) ** num_visible
    )


def monte_carlo_rejection(
    num_visible: int,
    noise_px: float,
    threshold_px: float = 15.0,
    draws: int = 1_000_000,
    seed: int = 0,
) -> float:
    """Sampled estimate of rejection_probability"""
    rng = derive_rng(seed, num_visible)
    rejected = 0
    for start in range(0, draws, MC_CHUNK):
        errors = stats.rayleigh.rvs(
            scale=noise_px,
            size=(min(MC_CHUNK, draws - start), num_visible),
            random_state=rng,
        )
        rejected += int(np.count_nonzero(errors.max(axis=1) >= threshold_px))
    return rejected / draws
