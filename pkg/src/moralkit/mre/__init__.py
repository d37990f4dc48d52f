"""Motion-aware radar encoder: segmentation network, compensation, training."""
from .compensation import Accumulation, MotionMask, accumulate, compensate, predict_mask, stack_frames
from .pointnet import MosConfig, MosNetwork, MotionFeatures, VelocityAttention, build_mos, mos_forward, velocity_encode
from .training import MosSample, build_samples, evaluate_mos, evaluate_threshold, threshold_mask, train_mos

__all__ = [
    "Accumulation", "MotionMask", "accumulate", "compensate", "predict_mask", "stack_frames",
    "MosConfig", "MosNetwork", "MotionFeatures", "VelocityAttention", "build_mos", "mos_forward",
    "velocity_encode", "MosSample", "build_samples", "evaluate_mos", "evaluate_threshold",
    "threshold_mask", "train_mos",
]
