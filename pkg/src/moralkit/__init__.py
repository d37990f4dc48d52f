"""Motion-aware 4D radar / LiDAR fusion detection toolkit on synthetic scenes."""
from .core import Box3D, Detection, EgoPose, FeatureMap, ObjectClass
from .config import PipelineConfig, load_config
from .encoders import GridSpec, Pillars, encode, pillarize
from .evaluation import EvalConfig, average_precision, evaluate, tail_elongation
from .fusion import adaptive_fuse, aggregate_motion, channel_attention, gated_fuse
from .ground import GroundParams, ground_mask, ransac_plane, remove_ground
from .mre import accumulate, compensate, predict_mask
from .scene import SceneConfig, read_sequence, simulate, tail_scene_config, write_sequence

__version__ = "0.1.0"

__all__ = [
    "Box3D", "Detection", "EgoPose", "FeatureMap", "ObjectClass", "PipelineConfig", "load_config",
    "GridSpec", "Pillars", "encode", "pillarize", "EvalConfig", "average_precision", "evaluate",
    "tail_elongation", "adaptive_fuse", "aggregate_motion", "channel_attention", "gated_fuse",
    "GroundParams", "ground_mask", "ransac_plane", "remove_ground", "accumulate", "compensate",
    "predict_mask", "SceneConfig", "read_sequence", "simulate", "tail_scene_config", "write_sequence",
]
