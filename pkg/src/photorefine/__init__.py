"""Refine coarse depth and recover albedo from a posed RGB-D key-frame sequence.

The object moves rigidly in front of a fixed camera under unknown, fixed,
low-frequency lighting. The pipeline matches every key frame to the
reference, estimates quadratic lighting from albedo-free intensity ratios,
recovers per-pixel normals and albedo with a robust EM fit, and integrates
the normals back into depth.
"""

from .config import PipelineConfig, SynthConfig, load_config
from .core import (
    AlbedoMap,
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    RadianceImage,
    RigidPose,
    angular_error_deg,
    normals_from_depth,
    project_pixel,
    sample_bilinear,
)
from .dataset import Dataset, load_dataset, write_dataset
from .errors import NumericalError, PhotorefineError, ValidationError
from .integrate import IntegrationConfig, integrate_normals
from .lighting import LightingConfig, build_ratio_set, estimate_lighting
from .match import CorrespondenceField, MatchConfig, match_frame
from .pipeline import run_pipeline
from .recover import EMConfig, recover_map
from .shading import QuadraticLighting, rotate_lighting, shade

__version__ = "0.1.0"

__all__ = [
    "AlbedoMap",
    "CameraIntrinsics",
    "CorrespondenceField",
    "Dataset",
    "DepthMap",
    "EMConfig",
    "IntegrationConfig",
    "LightingConfig",
    "MatchConfig",
    "NormalMap",
    "NumericalError",
    "PhotorefineError",
    "PipelineConfig",
    "QuadraticLighting",
    "RadianceImage",
    "RigidPose",
    "SynthConfig",
    "ValidationError",
    "angular_error_deg",
    "build_ratio_set",
    "estimate_lighting",
    "integrate_normals",
    "load_config",
    "load_dataset",
    "match_frame",
    "normals_from_depth",
    "project_pixel",
    "recover_map",
    "rotate_lighting",
    "run_pipeline",
    "sample_bilinear",
    "shade",
    "write_dataset",
]
