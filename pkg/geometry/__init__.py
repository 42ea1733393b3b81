"""SE(3) poses, the pinhole camera and the patch reprojection kernel."""

from geometry.camera import Intrinsics, project, unproject
from geometry.lie import Pose, hat, se3_exp, se3_log
from geometry.patch import Patch, reproject_patch

__all__ = [
    "Intrinsics",
    "Patch",
    "Pose",
    "hat",
    "project",
    "reproject_patch",
    "se3_exp",
    "se3_log",
    "unproject",
]
