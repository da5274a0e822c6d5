"""Coarse-to-fine point cloud registration with cross-modal hybrid attention.

The pipeline groups dense points under farthest-point superpoints, refines
superpoint features through alternating self / aggregation / cross attention,
matches them with a dustbin-augmented Sinkhorn assignment, densifies the
matches per patch, and estimates the rigid transform by weighted Procrustes
with local-to-global candidate selection.
"""

__version__ = "0.1.0"

from cmha._kernels import HAVE_EXT, LANE
from cmha.geometry import (
    PointCloud,
    RigidTransform,
    SuperpointSet,
    apply_transform,
    group_by_nearest_superpoint,
)
from cmha.matching import AssignmentMatrix, CorrespondenceSet
from cmha.metrics import MetricsReport, transform_errors
from cmha.pipeline import PipelineConfig, RegistrationResult, register_pair
from cmha.synth import SceneConfig, SyntheticScene, generate_scene

__all__ = [
    "HAVE_EXT",
    "LANE",
    "PointCloud",
    "RigidTransform",
    "SuperpointSet",
    "apply_transform",
    "group_by_nearest_superpoint",
    "AssignmentMatrix",
    "CorrespondenceSet",
    "MetricsReport",
    "transform_errors",
    "PipelineConfig",
    "RegistrationResult",
    "register_pair",
    "SceneConfig",
    "SyntheticScene",
    "generate_scene",
    "__version__",
]
