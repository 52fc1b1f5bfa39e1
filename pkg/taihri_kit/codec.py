"""Voxel tokens over the interaction volume and the prediction sequence
text format.

Each record of a prediction sequence is one line:

    left_wrist: (320,180) -> [500,250,125]

a joint name, its 2D location in integer pixels of the focal-unified image,
and its 3D location as voxel token indices in [0, 999].
"""
from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Any, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics, Pixel, Point3Cam, project
from .joints import JOINT_INDEX, JOINT_NAMES, KeypointSet
from .utils import KitError, check_fields, check_types

NUM_BINS = 1000
AXES = ("x", "y", "z")
TOKEN_AXES = ("X", "Y", "Z")
VOLUME_FIELDS = ("width_mm", "height_mm", "depth_mm", "origin_mm")

RECORD_LINE_REGEX = re.compile(
    r"^(?P<name>[a-z_]+): "
    r"\((?P<u>-?[0-9]+),(?P<v>-?[0-9]+)\) -> "
    r"\[(?P<X>-?[0-9]+),(?P<Y>-?[0-9]+),(?P<Z>-?[0-9]+)\]$"
)


class OutOfVolume(KitError):
    """Raised when a point to encode is outside the interaction volume"""

    def __init__(self, axis: str, value: float, low: float, high: float):
        super().__init__(
            f"Coordinate {axis}={value} mm is outside the volume "
            f"[{low}, {high})"
        )
        self.axis = axis


class TokenOutOfRange(KitError):
    """Raised when a voxel token index is outside [0, 999]"""


class EmptySequence(KitError):
    """Raised when no line of a prediction sequence parses"""

    def __init__(self, diagnostics: List["ParseDiagnostic"]) -> None:
        super().__init__(
            f"No valid record in the sequence "
            f"({len(diagnostics)} line(s) rejected)"
        )
        self.diagnostics = diagnostics


class MalformedRecordError(KitError):
    """Raised when a prediction record violates its invariants"""


class ClampedCoordinateWarning(Warning):
    """Warned when clamp mode moves an out-of-volume coordinate"""


@dataclass(frozen=True)
class InteractionVolume:
    """The W x H x D cuboid whose minimum corner sits at origin_mm"""

    width_mm: float = 4000.0
    height_mm: float = 3000.0
    depth_mm: float = 4000.0
    origin_mm: Tuple[float, float, float] = (-2000.0, -1500.0, 0.0)

    def __post_init__(self) -> None:
        for name in ("width_mm", "height_mm", "depth_mm"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value}")
        origin = tuple(float(v) for v in self.origin_mm)
        if len(origin) != 3 or not all(map(math.isfinite, origin)):
            raise ValueError(f"Invalid origin_mm: {self.origin_mm}")
        object.__setattr__(self, "origin_mm", origin)

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.width_mm, self.height_mm, self.depth_mm])

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.origin_mm)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InteractionVolume":
        check_fields(data, VOLUME_FIELDS, VOLUME_FIELDS, "volume")
        check_types(
            data,
            {"width_mm": "number", "height_mm": "number",
             "depth_mm": "number", "origin_mm": "list"},
            "volume",
        )
        return cls(
            width_mm=float(data["width_mm"]),
            height_mm=float(data["height_mm"]),
            depth_mm=float(data["depth_mm"]),
            origin_mm=tuple(data["origin_mm"]),
        )

    def to_dict(self) -> dict:
        return {
            "width_mm": self.width_mm,
            "height_mm": self.height_mm,
            "depth_mm": self.depth_mm,
            "origin_mm": list(self.origin_mm),
        }


DEFAULT_VOLUME = InteractionVolume()


class VoxelToken(NamedTuple):
    X: int
    Y: int
    Z: int


def encode_voxels(
    points: np.ndarray,
    vol: InteractionVolume = DEFAULT_VOLUME,
    clamp: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized voxel encoding of (N, 3) camera-frame points.

    Args:
        points: The points in millimeters.
        vol: The interaction volume.
        clamp: Clamp out-of-volume coordinates to the nearest index
            instead of raising.

    Returns:
        The (N, 3) integer tokens and the (N,) mask of clamped points.

    Raises:
        OutOfVolume: When clamp is off and a coordinate is outside the
            half-open volume.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    local = points - vol.origin
    extent = vol.extent
    outside = (local < 0) | (local >= extent) | ~np.isfinite(local)
    if outside.any() and not clamp:
        row, col = np.argwhere(outside)[0]
        raise OutOfVolume(
            AXES[col],
            float(points[row, col]),
            float(vol.origin[col]),
            float(vol.origin[col] + extent[col]),
        )

    with np.errstate(invalid="ignore"):
        index = np.floor(local / extent * NUM_BINS)
    index = np.nan_to_num(index, nan=0.0)
    # a float just below the upper bound may round up to NUM_BINS
    tokens = np.clip(index, 0, NUM_BINS - 1).astype(np.int64)
    return tokens, outside.any(axis=1)


def encode_voxel(
    p: Point3Cam,
    vol: InteractionVolume = DEFAULT_VOLUME,
    clamp: bool = False,
) -> VoxelToken:
    """Quantize a camera-frame point into a voxel token.

    Each index is floor(local / extent * 1000) with local = p - origin.

    Raises:
        OutOfVolume: When clamp is off and the point is outside the volume.
    """
    tokens, clamped = encode_voxels(np.array([p], dtype=float), vol, clamp)
    if clamped[0]:
        warnings.warn(
            f"Point {tuple(p)} clamped into the interaction volume",
            ClampedCoordinateWarning,
        )
    return VoxelToken(*(int(t) for t in tokens[0]))


def decode_voxels(
    tokens: np.ndarray,
    vol: InteractionVolume = DEFAULT_VOLUME,
) -> np.ndarray:
    """Vectorized voxel-center decoding of (N, 3) token indices.

    Raises:
        TokenOutOfRange: When an index is outside [0, 999].
    """
    tokens = np.asarray(tokens).reshape(-1, 3)
    bad = (tokens < 0) | (tokens >= NUM_BINS)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise TokenOutOfRange(
            f"Token {TOKEN_AXES[col]}={tokens[row, col]} is out of range "
            f"[0, {NUM_BINS - 1}]"
        )
    return (tokens + 0.5) * vol.extent / NUM_BINS + vol.origin


def decode_voxel(
    t: VoxelToken,
    vol: InteractionVolume = DEFAULT_VOLUME,
) -> Point3Cam:
    """Reconstruct the center of a voxel in camera-frame millimeters.

    Raises:
        TokenOutOfRange: When an index is outside [0, 999].
    """
    point = decode_voxels(np.array([tuple(t)]), vol)[0]
    return Point3Cam(*(float(v) for v in point))


def round_half_away(value: float) -> int:
    """Round to the nearest integer, halves away from zero"""
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


@dataclass(frozen=True)
class PredictionRecord:
    """One joint of a prediction sequence.

    Attributes:
        joint_name: The joint name from the vocabulary.
        pixel: The integer pixel in the focal-unified image.
        voxel: The voxel token.
    """

    joint_name: str
    pixel: Tuple[int, int]
    voxel: VoxelToken

    def __post_init__(self) -> None:
        if self.joint_name not in JOINT_INDEX:
            raise MalformedRecordError(
                f"\nUnknown joint name: {self.joint_name!r}"
                f"\nExpecting one of: {', '.join(JOINT_NAMES)}"
            )
        u, v = self.pixel
        if int(u) != u or int(v) != v:
            raise MalformedRecordError(
                f"\nPixel must be integer, got {self.pixel}"
            )
        voxel = VoxelToken(*(int(t) for t in self.voxel))
        for axis, index in zip(TOKEN_AXES, voxel):
            if not 0 <= index < NUM_BINS:
                raise MalformedRecordError(f"\n{axis} out of range: {index}")
        object.__setattr__(self, "pixel", (int(u), int(v)))
        object.__setattr__(self, "voxel", voxel)

    @classmethod
    def from_pixel(
        cls,
        joint_name: str,
        pixel: Pixel,
        voxel: VoxelToken,
    ) -> "PredictionRecord":
        """Build a record from a real-valued pixel, rounding half away
        from zero"""
        return cls(
            joint_name,
            (round_half_away(pixel[0]), round_half_away(pixel[1])),
            voxel,
        )

    def in_frame(self, k: CameraIntrinsics) -> bool:
        return k.contains(Pixel(*self.pixel))

    def __str__(self) -> str:
        u, v = self.pixel
        x, y, z = self.voxel
        return f"{self.joint_name}: ({u},{v}) -> [{x},{y},{z}]"


@dataclass(frozen=True)
class PredictionSequence:
    """Ordered prediction records with unique joint names"""

    records: Tuple[PredictionRecord, ...]

    def __post_init__(self) -> None:
        records = tuple(self.records)
        if not records:
            raise MalformedRecordError("\nA prediction sequence is empty")
        names = [record.joint_name for record in records]
        if len(set(names)) != len(names):
            raise MalformedRecordError(
                f"\nDuplicate joint names in sequence: {names}"
            )
        object.__setattr__(self, "records", records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(record.joint_name for record in self.records)

    def out_of_frame(self, k: CameraIntrinsics) -> List[str]:
        """Names of the records whose pixel falls outside the image"""
        return [r.joint_name for r in self.records if not r.in_frame(k)]

    def to_keypoints(
        self,
        vol: InteractionVolume = DEFAULT_VOLUME,
    ) -> KeypointSet:
        """Decode the voxel tokens into metric camera-frame keypoints"""
        tokens = np.array([tuple(r.voxel) for r in self.records])
        return KeypointSet(
            names=self.names,
            xyz=decode_voxels(tokens, vol),
            visible=np.ones(len(self.records), dtype=bool),
        )


@dataclass(frozen=True)
class ParseDiagnostic:
    line: int
    reason: str
    text: str = field(default="", compare=False)

    def to_dict(self) -> dict:
        return {"line": self.line, "reason": self.reason, "text": self.text}


def serialize_sequence(seq: PredictionSequence) -> str:
    """One record per line, in order, newline separated"""
    return "\n".join(str(record) for record in seq.records)


def _token_index(text: str) -> int:
    """The token index of a digit run, NUM_BINS for any out-of-range run
    too long to convert"""
    if len(text.lstrip("-").lstrip("0")) > len(str(NUM_BINS)):
        return NUM_BINS
    return int(text)


def parse_sequence(
    text: str | bytes,
) -> Tuple[PredictionSequence, List[ParseDiagnostic]]:
    """Parse prediction sequence text, skipping and reporting bad lines.

    Blank lines are ignored. A malformed line, an unknown joint name or an
    out-of-range token index rejects the line; a repeated joint name keeps
    the first occurrence and flags the rest.

    Args:
        text: The model output; bytes are decoded as UTF-8 with
            replacement.

    Returns:
        The parsed sequence and the diagnostics.

    Raises:
        EmptySequence: When no line parses; the diagnostics are attached.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")

    records: List[PredictionRecord] = []
    seen: dict = {}
    diagnostics: List[ParseDiagnostic] = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue

        matched = RECORD_LINE_REGEX.match(line)
        if not matched:
            diagnostics.append(
                ParseDiagnostic(lineno, "malformed line", line)
            )
            continue

        name = matched.group("name")
        if name not in JOINT_INDEX:
            diagnostics.append(
                ParseDiagnostic(lineno, f"unknown joint name {name!r}", line)
            )
            continue

        voxel = [_token_index(matched.group(axis)) for axis in TOKEN_AXES]
        bad_axes = [
            axis
            for axis, index in zip(TOKEN_AXES, voxel)
            if not 0 <= index < NUM_BINS
        ]
        if bad_axes:
            diagnostics.append(
                ParseDiagnostic(
                    lineno,
                    f"{','.join(bad_axes)} out of range",
                    line,
                )
            )
            continue

        if name in seen:
            diagnostics.append(
                ParseDiagnostic(
                    lineno,
                    f"duplicate joint name {name!r} "
                    f"(first on line {seen[name]})",
                    line,
                )
            )
            continue

        try:
            pixel = (int(matched.group("u")), int(matched.group("v")))
        except ValueError:
            # beyond the interpreter's int-from-text digit limit
            diagnostics.append(
                ParseDiagnostic(lineno, "pixel coordinate too long", line)
            )
            continue

        seen[name] = lineno
        records.append(PredictionRecord(name, pixel, VoxelToken(*voxel)))

    if not records:
        raise EmptySequence(diagnostics)

    return PredictionSequence(tuple(records)), diagnostics


def encode_keypoints(
    keypoints: KeypointSet,
    k: CameraIntrinsics,
    vol: InteractionVolume = DEFAULT_VOLUME,
    names: Sequence[str] | None = None,
    clamp: bool = False,
) -> PredictionSequence:
    """Build the target sequence for camera-frame keypoints.

    Pixels come from projecting the 3D joints with the (focal-unified)
    intrinsics, so every selected joint must be in front of the camera.
    """
    names = list(names) if names is not None else list(keypoints.names)
    records = []
    for name in names:
        point = Point3Cam(*keypoints[name])
        records.append(
            PredictionRecord.from_pixel(
                name,
                project(point, k),
                encode_voxel(point, vol, clamp=clamp),
            )
        )
    return PredictionSequence(tuple(records))
