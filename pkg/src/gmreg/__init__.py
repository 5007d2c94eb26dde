"""Point cloud registration by keypoint graph matching.

Rotation-invariant spherical-harmonic descriptors on ISS keypoints feed a
Frank-Wolfe graph matcher; correspondence and a closed-form similarity
transform are then refined alternately until the motion settles.
"""

from .cloud_io import PointCloud, load_cloud, write_cloud
from .errors import RegistrationError
from .pipeline import PipelineConfig, RegistrationResult, register
from .transform import SimilarityTransform, registration_errors

__all__ = [
    "PointCloud",
    "load_cloud",
    "write_cloud",
    "RegistrationError",
    "PipelineConfig",
    "RegistrationResult",
    "register",
    "SimilarityTransform",
    "registration_errors",
]
__version__ = "0.1.0"
