"""Deterministic synthetic 2D driving micro-world."""

from .collision import CollisionCheck, check_collision, collision_flags_batch
from .dataset import Dataset, DatasetError, ExpertRecord, build_dataset, load_dataset, parse_domain_mix
from .geometry import Polyline, Pose2D, boxes_overlap, boxes_overlap_batch, wrap_angle
from .observe import observe
from .scene import (
    DEFAULT_WORLD,
    AgentTrack,
    Scene,
    SceneGenerationError,
    WorldConfig,
    expert_is_sound,
    generate_scene,
    mirror_scene,
    script_expert,
    transform_scene,
)

__all__ = [
    "AgentTrack", "CollisionCheck", "DEFAULT_WORLD", "Dataset", "DatasetError", "ExpertRecord",
    "Polyline", "Pose2D", "Scene", "SceneGenerationError", "WorldConfig", "boxes_overlap",
    "boxes_overlap_batch", "build_dataset", "check_collision", "collision_flags_batch",
    "expert_is_sound", "generate_scene", "load_dataset", "mirror_scene", "observe",
    "parse_domain_mix", "script_expert", "transform_scene", "wrap_angle",
]
