from .camera import CameraIntrinsics, project, backproject, unify_focal  # noqa: F401
from .codec import (  # noqa: F401
    InteractionVolume,
    encode_voxel,
    decode_voxel,
    parse_sequence,
    serialize_sequence,
)
from .joints import JOINT_NAMES, KeypointSet  # noqa: F401
from .reward import RewardConfig, pose_reward  # noqa: F401
from .utils import KitError  # noqa: F401

__version__ = "0.1.0"
