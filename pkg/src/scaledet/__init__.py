"""Scale-aware deformable attention for monocular 3D detection, at desk scale."""
from .core_types import (CATEGORY_SCALE_SETS, Calibration, FeatureMap, LossWeights, MaskSpec,
                         Query, SceneLabel, ScaleDistribution, ScaleSet, ground_truth_scale,
                         normalize_position)
from .estimator import ScaleAwareMonoDetector
from .model import ModelConfig, MonoDetector
from .ssda import ScaleAwareDeformableAttention

__version__ = "0.1.0"

__all__ = [
    "CATEGORY_SCALE_SETS", "Calibration", "FeatureMap", "LossWeights", "MaskSpec", "ModelConfig",
    "MonoDetector", "Query", "SceneLabel", "ScaleAwareDeformableAttention",
    "ScaleAwareMonoDetector", "ScaleDistribution", "ScaleSet", "ground_truth_scale",
    "normalize_position",
]
