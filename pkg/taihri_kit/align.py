"""Place a root-relative pose in the camera frame from predicted anchors.

With one anchor the pose is translated, with two the anchor segment is
also turned onto the predicted one by the smallest rotation (no roll about
the segment), with three or more the least-squares rigid transform is
solved in closed form. Anchors are weighted uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.linalg import det, svd
from scipy.spatial.transform import Rotation

from .joints import KeypointSet, check_joint_name
from .utils import ConfigError, KitError, check_fields, check_types

ANCHOR_FIELDS = ("name", "source_mm", "target_mm")
ANCHORS_FILE_FIELDS = ("anchors", "with_scale")
ANCHOR_KINDS = {"name": "string", "source_mm": "list", "target_mm": "list"}
ORTHONORMAL_TOL = 1e-9
# relative singular value below which anchors count as collinear
COLLINEAR_TOL = 1e-9


class TooFewAnchors(KitError):
    """Raised when an alignment gets fewer anchors than it needs"""


class CollinearAnchors(KitError):
    """Raised when three or more anchors do not span a plane"""


class CoincidentPair(KitError):
    """Raised when two anchors coincide, leaving no segment to align"""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p' = scale * R p + t, scale 1 for a rigid transform.

    Attributes:
        rotation: A proper 3x3 rotation.
        translation: The translation in mm.
        scale: The similarity scale, 1.0 unless scale is estimated.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        translation = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(
            rotation.T @ rotation, np.eye(3), rtol=0, atol=ORTHONORMAL_TOL
        ):
            raise ValueError("rotation is not orthonormal")
        if abs(det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.isfinite(translation).all():
            raise ValueError("translation must be finite")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RigidTransform":
        check_fields(
            data,
            ("rotation", "translation_mm", "scale"),
            ("rotation", "translation_mm"),
            "transform",
        )
        check_types(
            data,
            {"rotation": "list", "translation_mm": "list", "scale": "number"},
            "transform",
        )
        return cls(
            np.array(data["rotation"], dtype=float),
            np.array(data["translation_mm"], dtype=float),
            float(data.get("scale", 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation_mm": self.translation.tolist(),
            "scale": self.scale,
        }

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot_t = self.rotation.T
        return RigidTransform(
            rot_t,
            -(rot_t @ self.translation) / self.scale,
            1.0 / self.scale,
        )


@dataclass(frozen=True, eq=False)
class AnchorCorrespondence:
    """Name-matched anchors: source in the root-relative frame, target as
    predicted in the camera frame (mm)"""

    names: Tuple[str, ...]
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self) -> None:
        names = tuple(check_joint_name(name) for name in self.names)
        if not names:
            raise TooFewAnchors("Alignment needs at least one anchor")
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate anchor names: {names}")
        source = np.array(self.source, dtype=float).reshape(len(names), 3)
        target = np.array(self.target, dtype=float).reshape(len(names), 3)
        if not (np.isfinite(source).all() and np.isfinite(target).all()):
            raise ValueError("Anchor coordinates must be finite")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "target", target)

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def from_keypoints(
        cls,
        pose: KeypointSet,
        predicted: KeypointSet,
        names: Sequence[str],
    ) -> "AnchorCorrespondence":
        """Pair the named joints of a root-relative pose with predictions"""
        names = tuple(names)
        return cls(
            names,
            np.array([pose[name] for name in names]),
            np.array([predicted[name] for name in names]),
        )

    @classmethod
    def from_records(
        cls,
        records: Sequence[Mapping[str, Any]],
    ) -> "AnchorCorrespondence":
        if not isinstance(records, (list, tuple)):
            raise ConfigError(
                f"\nInvalid anchors: {records!r}"
                "\nExpecting: a list of anchor records"
            )
        for record in records:
            check_fields(record, ANCHOR_FIELDS, ANCHOR_FIELDS, "anchor")
            check_types(record, ANCHOR_KINDS, "anchor")
        try:
            source = np.array([r["source_mm"] for r in records], dtype=float)
            target = np.array([r["target_mm"] for r in records], dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(
                "\nInvalid anchor coordinates"
                "\nExpecting: three numbers for source_mm and target_mm"
            ) from None
        return cls(tuple(record["name"] for record in records), source, target)

    def subset(self, names: Sequence[str]) -> "AnchorCorrespondence":
        idx = [self.names.index(name) for name in names]
        return AnchorCorrespondence(
            tuple(names), self.source[idx], self.target[idx]
        )


def _check_spread(points: np.ndarray, what: str) -> None:
    centered = points - points.mean(axis=0)
    sv = svd(centered, compute_uv=False)
    if sv[0] == 0 or sv[1] <= COLLINEAR_TOL * sv[0]:
        raise CollinearAnchors(
            f"\n{what.capitalize()} anchors are collinear or coincident"
            "\nExpecting: at least three anchors spanning a plane"
        )


def kabsch(
    corr: AnchorCorrespondence,
    with_scale: bool = False,
) -> RigidTransform:
    """Least-squares rigid (or similarity) transform from source to target.

    Centroids are removed, the rotation comes from the SVD of the
    cross-covariance with the reflection corrected, the translation maps
    the source centroid onto the target centroid.

    Raises:
        TooFewAnchors: With fewer than three correspondences.
        CollinearAnchors: When source or target anchors are collinear.
    """
    if len(corr) < 3:
        raise TooFewAnchors(
            f"Closed-form alignment needs >= 3 anchors, got {len(corr)}"
        )
    _check_spread(corr.source, "source")
    _check_spread(corr.target, "target")

    src_mean = corr.source.mean(axis=0)
    dst_mean = corr.target.mean(axis=0)
    src = corr.source - src_mean
    dst = corr.target - dst_mean

    u, sv, vt = svd(src.T @ dst)
    sign = np.ones(3)
    if det(vt.T @ u.T) < 0:
        sign[2] = -1.0
    rotation = vt.T @ np.diag(sign) @ u.T

    scale = 1.0
    if with_scale:
        scale = float(np.sum(sv * sign) / np.sum(src * src))
    return RigidTransform(rotation, dst_mean - scale * rotation @ src_mean, scale)


def _minimal_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation turning direction a onto direction b"""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    sin = np.linalg.norm(axis)
    cos = float(np.dot(a, b))
    if sin < 1e-12:
        if cos > 0:
            return np.eye(3)
        # antiparallel: half turn about any axis normal to a
        helper = np.eye(3)[int(np.argmin(np.abs(a)))]
        axis = np.cross(a, helper)
        return Rotation.from_rotvec(
            math.pi * axis / np.linalg.norm(axis)
        ).as_matrix()
    return Rotation.from_rotvec(axis / sin * math.atan2(sin, cos)).as_matrix()


def align_with_anchors(
    corr: AnchorCorrespondence,
    with_scale: bool = False,
) -> RigidTransform:
    """Transform for 1, 2 or more anchors.

    1 anchor: translation only. 2 anchors: segment midpoints matched and
    the minimal rotation between the segment directions. 3 or more:
    closed-form least squares, optionally with scale.

    Raises:
        CoincidentPair: Two anchors with a zero-length segment.
        CollinearAnchors: Three or more collinear anchors.
    """
    if len(corr) == 1:
        return RigidTransform(np.eye(3), corr.target[0] - corr.source[0])

    if len(corr) == 2:
        seg_src = corr.source[1] - corr.source[0]
        seg_dst = corr.target[1] - corr.target[0]
        if np.linalg.norm(seg_src) == 0 or np.linalg.norm(seg_dst) == 0:
            raise CoincidentPair(
                f"\nAnchors {corr.names[0]} and {corr.names[1]} coincide"
                "\nExpecting: two distinct anchor positions"
            )
        rotation = _minimal_rotation(seg_src, seg_dst)
        mid_src = corr.source.mean(axis=0)
        mid_dst = corr.target.mean(axis=0)
        return RigidTransform(rotation, mid_dst - rotation @ mid_src)

    return kabsch(corr, with_scale=with_scale)


def apply_transform(t: RigidTransform, points: KeypointSet) -> KeypointSet:
    """Transform every joint, keeping visibility"""
    return points.with_xyz(t.apply(points.xyz))


def anchor_residuals(t: RigidTransform, corr: AnchorCorrespondence) -> np.ndarray:
    """Per-anchor distance between the transformed source and the target"""
    return np.linalg.norm(t.apply(corr.source) - corr.target, axis=1)


@dataclass(frozen=True)
class AblationRow:
    anchors: Tuple[str, ...]
    error_mm: float
    max_residual_mm: float

    def to_dict(self) -> dict:
        return {
            "anchors": list(self.anchors),
            "error_mm": self.error_mm,
            "max_residual_mm": self.max_residual_mm,
        }


def anchor_ablation(
    pose: KeypointSet,
    predicted: KeypointSet,
    gt: KeypointSet,
    anchor_names: Sequence[str],
    eval_joint: str = "right_wrist",
    with_scale: bool = False,
) -> List[AblationRow]:
    """Evaluation-joint error when aligning with the first 1..N anchors.

    The first row is the baseline: the pose translated by the offset
    between the predicted anchor centroid and the pose anchor centroid,
    without rotation.

    Args:
        pose: The root-relative pose.
        predicted: Predicted camera-frame joints, holding the anchors.
        gt: Camera-frame ground truth, holding the evaluation joint.
        anchor_names: The anchors, in the order they are added.
        eval_joint: The joint whose placement error is reported.
        with_scale: Estimate scale when three or more anchors are used.
    """
    corr = AnchorCorrespondence.from_keypoints(pose, predicted, anchor_names)
    target = gt[eval_joint]

    offset = corr.target.mean(axis=0) - corr.source.mean(axis=0)
    baseline = RigidTransform(np.eye(3), offset)
    rows = [
        AblationRow(
            (),
            float(np.linalg.norm(baseline.apply(pose[eval_joint]) - target)),
            float(anchor_residuals(baseline, corr).max()),
        )
    ]
    for count in range(1, len(corr) + 1):
        sub = corr.subset(corr.names[:count])
        transform = align_with_anchors(sub, with_scale=with_scale)
        rows.append(
            AblationRow(
                sub.names,
                float(
                    np.linalg.norm(transform.apply(pose[eval_joint]) - target)
                ),
                float(anchor_residuals(transform, sub).max()),
            )
        )
    return rows
