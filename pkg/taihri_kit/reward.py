"""Pose-aware reward: Huber-aggregated joint error mixed with a PCK-style
success rate, computed on visible joints only.

    r = lambda * exp(-E / tau) + (1 - lambda) * mean_{j in V} 1(d_j < kappa)
    E = mean_{j in V} huber_delta(d_j)

The same formula serves 3D (mm) and 2D (px) errors; (delta, kappa, tau)
carry the units of the distances, E and thus tau are squared-unit scaled
below the Huber knee. Sums are correctly rounded (math.fsum), so the reward
does not depend on joint order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .joints import KeypointSet, NoVisibleJoints
from .utils import check_fields, check_types

REWARD_FIELDS = ("delta", "kappa", "tau", "lambda")


@dataclass(frozen=True)
class RewardConfig:
    """Huber threshold, PCK threshold, temperature and mixing weight.

    `lam` is serialized as `lambda`.
    """

    delta: float
    kappa: float
    tau: float
    lam: float = 0.5

    def __post_init__(self) -> None:
        for name in ("delta", "kappa", "tau"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RewardConfig":
        check_fields(data, REWARD_FIELDS, REWARD_FIELDS, "reward config")
        check_types(data, dict.fromkeys(REWARD_FIELDS, "number"), "reward config")
        return cls(
            delta=float(data["delta"]),
            kappa=float(data["kappa"]),
            tau=float(data["tau"]),
            lam=float(data["lambda"]),
        )

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "kappa": self.kappa,
            "tau": self.tau,
            "lambda": self.lam,
        }


DEFAULT_REWARD_3D = RewardConfig(delta=100.0, kappa=150.0, tau=2500.0, lam=0.5)
DEFAULT_REWARD_2D = RewardConfig(delta=10.0, kappa=15.0, tau=250.0, lam=0.5)


@dataclass(frozen=True, eq=False)
class JointErrors:
    """Per-joint distances and the visibility mask V"""

    distances: np.ndarray
    visibility: np.ndarray

    def __post_init__(self) -> None:
        distances = np.asarray(self.distances, dtype=float).reshape(-1)
        visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if distances.shape != visibility.shape:
            raise ValueError(
                f"{len(distances)} distances but {len(visibility)} "
                "visibility flags"
            )
        if not np.isfinite(distances).all() or (distances < 0).any():
            raise ValueError("Joint distances must be finite and >= 0")
        object.__setattr__(self, "distances", distances)
        object.__setattr__(self, "visibility", visibility)

    @classmethod
    def between(
        cls,
        pred: KeypointSet,
        gt: KeypointSet,
        names: Sequence[str] | None = None,
    ) -> "JointErrors":
        """3D errors of pred against gt, visibility taken from gt"""
        names = list(names) if names is not None else list(gt.names)
        pred_xyz = np.array([pred[name] for name in names])
        gt_xyz = np.array([gt[name] for name in names])
        return cls(
            distances=np.linalg.norm(pred_xyz - gt_xyz, axis=1),
            visibility=np.array([gt.is_visible(name) for name in names]),
        )

    @classmethod
    def between_pixels(
        cls,
        pred_uv: np.ndarray,
        gt_uv: np.ndarray,
        visibility: np.ndarray,
    ) -> "JointErrors":
        """2D errors of (N, 2) predicted pixels against ground truth"""
        pred_uv = np.asarray(pred_uv, dtype=float).reshape(-1, 2)
        gt_uv = np.asarray(gt_uv, dtype=float).reshape(-1, 2)
        visibility = np.asarray(visibility, dtype=bool)
        distances = np.zeros(len(gt_uv))
        distances[visibility] = np.linalg.norm(
            pred_uv[visibility] - gt_uv[visibility],
            axis=1,
        )
        return cls(distances=distances, visibility=visibility)

    @property
    def visible_distances(self) -> np.ndarray:
        return self.distances[self.visibility]


def huber(d: float, delta: float) -> float:
    """Quadratic up to delta, linear after, C1 at the knee"""
    if d <= delta:
        return 0.5 * d * d
    return delta * (d - 0.5 * delta)


def _visible(errs: JointErrors) -> np.ndarray:
    visible = errs.visible_distances
    if visible.size == 0:
        raise NoVisibleJoints("Reward needs at least one visible joint")
    return visible


def aggregate_error(errs: JointErrors, delta: float) -> float:
    """Mean Huber penalty over visible joints.

    Raises:
        NoVisibleJoints: When no joint is visible.
    """
    visible = _visible(errs)
    return math.fsum(huber(float(d), delta) for d in visible) / visible.size


def pck(errs: JointErrors, kappa: float) -> float:
    """Fraction of visible joints with error strictly below kappa"""
    visible = _visible(errs)
    return int(np.count_nonzero(visible < kappa)) / visible.size


def pose_reward(errs: JointErrors, cfg: RewardConfig) -> float:
    """The pose-aware reward in [0, 1].

    Raises:
        NoVisibleJoints: When no joint is visible.
    """
    energy = aggregate_error(errs, cfg.delta)
    success = pck(errs, cfg.kappa)
    return cfg.lam * math.exp(-energy / cfg.tau) + (1.0 - cfg.lam) * success


def combined_reward(
    errs_3d: JointErrors,
    errs_2d: JointErrors,
    cfg_3d: RewardConfig = DEFAULT_REWARD_3D,
    cfg_2d: RewardConfig = DEFAULT_REWARD_2D,
    weight_3d: float = 0.5,
) -> float:
    """Weighted mix of the 3D and 2D pose rewards"""
    if not 0 <= weight_3d <= 1:
        raise ValueError(f"weight_3d must be in [0, 1], got {weight_3d}")
    return (
        weight_3d * pose_reward(errs_3d, cfg_3d)
        + (1.0 - weight_3d) * pose_reward(errs_2d, cfg_2d)
    )
