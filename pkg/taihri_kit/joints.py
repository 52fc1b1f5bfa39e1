"""The joint vocabulary and the keypoint container shared by every module.

Coordinates are camera-frame millimeters with +x right, +y down and +z
forward along the optical axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, List, Mapping, Sequence

import numpy as np

from .utils import ConfigError, KitError, check_fields, check_types

JOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# (parent, child), 16 bones spanning the 17 joints
BONES = (
    ("nose", "left_eye"),
    ("nose", "right_eye"),
    ("left_eye", "left_ear"),
    ("right_eye", "right_ear"),
    ("nose", "left_shoulder"),
    ("nose", "right_shoulder"),
    ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"),
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
)

# fields of one entry in the `joints` list of a JSONL record
JOINT_RECORD_FIELDS = ("name", "xyz_mm", "uv_px", "visible")
JOINT_RECORD_KINDS = {
    "name": "string",
    "xyz_mm": "list",
    "uv_px": "list|null",
    "visible": "boolean",
}


class NoVisibleJoints(KitError):
    """Raised when an operation needs at least one visible joint"""


class MissingJoint(KitError):
    """Raised when a required joint is absent from a keypoint set"""

    def __init__(self, name: str, where: str = "keypoint set") -> None:
        super().__init__(f"Joint {name!r} is missing from the {where}")
        self.name = name


def check_joint_name(name: str) -> str:
    if name not in JOINT_INDEX:
        raise ValueError(
            f"Unknown joint name: {name!r}\n"
            f"Expecting one of: {', '.join(JOINT_NAMES)}"
        )
    return name


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Named 3D joints with per-joint visibility.

    Attributes:
        names: The joint names, unique, from the vocabulary.
        xyz: The (N, 3) coordinates in millimeters.
        visible: The (N,) visibility flags.
    """

    names: tuple
    xyz: np.ndarray
    visible: np.ndarray

    def __post_init__(self) -> None:
        names = tuple(check_joint_name(name) for name in self.names)
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate joint names: {names}")

        xyz = np.array(self.xyz, dtype=float).reshape(len(names), 3)
        if not np.isfinite(xyz).all():
            raise ValueError("Keypoint coordinates must be finite")
        visible = np.array(self.visible, dtype=bool).reshape(len(names))
        xyz.setflags(write=False)
        visible.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "visible", visible)

    @classmethod
    def from_mapping(
        cls,
        points: Mapping[str, Sequence[float]],
        visible: Mapping[str, bool] | None = None,
    ) -> "KeypointSet":
        names = tuple(points)
        visible = visible or {}
        return cls(
            names=names,
            xyz=np.array([points[name] for name in names], dtype=float),
            visible=np.array([visible.get(name, True) for name in names]),
        )

    @classmethod
    def from_records(cls, joints: Iterable[Mapping[str, Any]]) -> "KeypointSet":
        """Build from the `joints` list of a dataset/prediction JSONL record"""
        if not isinstance(joints, (list, tuple)):
            raise ConfigError(
                f"\nInvalid joints: {joints!r}"
                "\nExpecting: a list of joint records"
            )
        for joint in joints:
            check_fields(
                joint, JOINT_RECORD_FIELDS, ("name", "xyz_mm"), "joint record"
            )
            check_types(joint, JOINT_RECORD_KINDS, "joint record")
        try:
            xyz = np.array([joint["xyz_mm"] for joint in joints], dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(
                "\nInvalid xyz_mm in joint records"
                "\nExpecting: three numbers per joint"
            ) from None
        return cls(
            names=tuple(joint["name"] for joint in joints),
            xyz=xyz,
            visible=np.array([joint.get("visible", True) for joint in joints]),
        )

    def to_records(self) -> List[dict]:
        return [
            {
                "name": name,
                "xyz_mm": [float(v) for v in self.xyz[i]],
                "visible": bool(self.visible[i]),
            }
            for i, name in enumerate(self.names)
        ]

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise MissingJoint(name) from None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.xyz[self.index(name)]

    def is_visible(self, name: str) -> bool:
        return bool(self.visible[self.index(name)])

    def subset(self, names: Iterable[str]) -> "KeypointSet":
        idx = [self.index(name) for name in names]
        return KeypointSet(
            names=tuple(self.names[i] for i in idx),
            xyz=self.xyz[idx],
            visible=self.visible[idx],
        )

    def with_xyz(self, xyz: np.ndarray) -> "KeypointSet":
        return KeypointSet(names=self.names, xyz=xyz, visible=self.visible)

    def translate(self, offset: Sequence[float]) -> "KeypointSet":
        return self.with_xyz(self.xyz + np.asarray(offset, dtype=float))
