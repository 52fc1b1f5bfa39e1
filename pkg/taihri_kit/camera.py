"""Pinhole camera geometry and intrinsic-conditioned normalization.

Axis convention: +z forward along the optical axis, +x right, +y down, so
that projection is sign-free: u = fx * x / z + cx, v = fy * y / z + cy.
3D coordinates are millimeters, 2D coordinates are pixels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Mapping, NamedTuple, Tuple

import numpy as np

from .utils import KitError, check_fields, check_types

INTRINSICS_FIELDS = ("fx", "fy", "cx", "cy", "width", "height")


class NonPositiveDepth(KitError):
    """Raised when a point to project or a depth to back-project is not
    in front of the camera"""


class Pixel(NamedTuple):
    u: float
    v: float


class Point3Cam(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal lengths and principal point in pixels, image size.

    The principal point may lie outside the image, crops move it.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(
                f"Focal lengths must be positive, got fx={self.fx}, "
                f"fy={self.fy}"
            )
        if not (math.isfinite(self.fx) and math.isfinite(self.fy)):
            raise ValueError("Focal lengths must be finite")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError(
                f"Principal point must be finite, got ({self.cx}, {self.cy})"
            )
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("Image dimensions must be integers")
        if self.width < 1 or self.height < 1:
            raise ValueError(
                f"Image dimensions must be >= 1, got "
                f"{self.width}x{self.height}"
            )
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CameraIntrinsics":
        check_fields(data, INTRINSICS_FIELDS, INTRINSICS_FIELDS, "intrinsics")
        check_types(
            data,
            {"fx": "number", "fy": "number", "cx": "number", "cy": "number",
             "width": "number", "height": "number"},
            "intrinsics",
        )
        return cls(**{key: data[key] for key in INTRINSICS_FIELDS})

    def to_dict(self) -> dict:
        return asdict(self)

    def matrix(self) -> np.ndarray:
        """The 3x3 calibration matrix K"""
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def contains(self, px: Pixel) -> bool:
        """Whether the pixel lies in [0, width) x [0, height)"""
        return 0 <= px.u < self.width and 0 <= px.v < self.height


DEFAULT_INTRINSICS = CameraIntrinsics(
    fx=1000.0, fy=1000.0, cx=640.0, cy=360.0, width=1280, height=720
)


def project(p: Point3Cam, k: CameraIntrinsics) -> Pixel:
    """Project a camera-frame point to the image.

    Raises:
        NonPositiveDepth: When the point is not in front of the camera.
    """
    x, y, z = p
    if not z > 0:
        raise NonPositiveDepth(f"Cannot project a point with z={z} <= 0")
    return Pixel(k.fx * x / z + k.cx, k.fy * y / z + k.cy)


def backproject(px: Pixel, depth_mm: float, k: CameraIntrinsics) -> Point3Cam:
    """Lift a pixel to the camera-frame point at the given depth.

    Raises:
        NonPositiveDepth: When depth_mm <= 0.
    """
    if not depth_mm > 0:
        raise NonPositiveDepth(
            f"Cannot back-project with depth {depth_mm} <= 0"
        )
    u, v = px
    return Point3Cam(
        (u - k.cx) * depth_mm / k.fx,
        (v - k.cy) * depth_mm / k.fy,
        float(depth_mm),
    )


def project_points(
    points: np.ndarray,
    k: CameraIntrinsics,
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) points.

    Returns:
        The (N, 2) pixels (NaN where z <= 0) and the (N,) in-front mask.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    front = points[:, 2] > 0
    uv = np.full((len(points), 2), np.nan)
    z = points[front, 2]
    uv[front, 0] = k.fx * points[front, 0] / z + k.cx
    uv[front, 1] = k.fy * points[front, 1] / z + k.cy
    return uv, front


def in_frustum(points: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Per-point visibility: in front of the camera and inside the image"""
    uv, front = project_points(points, k)
    inside = np.zeros(len(uv), dtype=bool)
    inside[front] = (
        (uv[front, 0] >= 0)
        & (uv[front, 0] < k.width)
        & (uv[front, 1] >= 0)
        & (uv[front, 1] < k.height)
    )
    return inside


def unify_focal(
    k: CameraIntrinsics,
    target_focal: float = 1000.0,
) -> Tuple[CameraIntrinsics, float]:
    """Rescale the intrinsics so fx equals the target focal length.

    The scale derives from fx and is applied to fy too, so anisotropic
    cameras stay anisotropic. Image resampling is left to the caller,
    only coordinates change.

    Args:
        k: The original intrinsics.
        target_focal: The canonical focal length in pixels.

    Returns:
        The unified intrinsics and the scale factor; pixels map as
        (u, v) -> (scale * u, scale * v).
    """
    if not target_focal > 0:
        raise ValueError(f"target_focal must be positive, got {target_focal}")

    scale = target_focal / k.fx
    unified = CameraIntrinsics(
        fx=float(target_focal),
        fy=k.fy * scale,
        cx=k.cx * scale,
        cy=k.cy * scale,
        width=max(1, round(k.width * scale)),
        height=max(1, round(k.height * scale)),
    )
    return unified, scale


def scale_pixel(px: Pixel, scale: float) -> Pixel:
    return Pixel(px.u * scale, px.v * scale)


def apply_crop(
    k: CameraIntrinsics,
    crop_origin: Pixel,
    crop_w: int,
    crop_h: int,
) -> CameraIntrinsics:
    """Intrinsics of a crop whose top-left corner is at crop_origin.

    The crop may extend past the image bounds (the caller pads), and the
    principal point may end up outside the crop.
    """
    if crop_w < 1 or crop_h < 1:
        raise ValueError(f"Crop size must be >= 1, got {crop_w}x{crop_h}")
    return replace(
        k,
        cx=k.cx - crop_origin.u,
        cy=k.cy - crop_origin.v,
        width=int(crop_w),
        height=int(crop_h),
    )


def random_crop(
    k: CameraIntrinsics,
    crop_w: int,
    crop_h: int,
    rng: np.random.Generator,
) -> Tuple[Pixel, CameraIntrinsics]:
    """Sample an integer crop origin within the image and crop to it.

    Used to augment the principal point offset. When the crop is larger
    than the image along an axis, the origin along that axis is 0.
    """
    max_u = max(0, k.width - crop_w)
    max_v = max(0, k.height - crop_h)
    origin = Pixel(
        float(rng.integers(0, max_u + 1)),
        float(rng.integers(0, max_v + 1)),
    )
    return origin, apply_crop(k, origin, crop_w, crop_h)
