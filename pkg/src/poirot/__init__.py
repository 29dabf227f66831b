"""Rotation-invariant point-cloud learning with spherical and SO(3) correlations."""

from .detection import DetectConfig, DetectionResult, detect, select
from .errors import PoirotError
from .geometry import PointCloud, Rotation, geodesic_affinity, is_hull_vertex, random_rotation
from .model import ModelConfig, POIRot, TrainConfig, count_params, evaluate, train
from .sphere import ResponseConfig, downsample, respond, response_scores

__version__ = "0.1.0"

__all__ = [
    "DetectConfig",
    "DetectionResult",
    "ModelConfig",
    "POIRot",
    "PoirotError",
    "PointCloud",
    "ResponseConfig",
    "Rotation",
    "TrainConfig",
    "count_params",
    "detect",
    "downsample",
    "evaluate",
    "geodesic_affinity",
    "is_hull_vertex",
    "random_rotation",
    "respond",
    "response_scores",
    "select",
    "train",
]
