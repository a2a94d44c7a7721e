"""Staged Levenberg-Marquardt inverse kinematics for articulated skeletons.

Fits joint coordinates, segment scales and per-site offsets to 3D marker
targets or multi-camera 2D detections, with robust triangulation, site
correspondence refinement and Procrustes-aligned evaluation.
"""

__version__ = "0.1.0"

from .cameras import Camera, CameraRig, gc_at_threshold, project, robust_triangulate  # noqa: E402
from .frames import MarkerFrame, MultiviewFrame  # noqa: E402
from .mapping import CorrespondenceTable, discover_correspondences, refine_sites_em  # noqa: E402
from .metrics import (  # noqa: E402
    AlignmentRegion, cross_view_consistency, joint_angle_mae, pa_mpjpe, procrustes_align,
)
from .pipeline import solve_monocular, solve_multiview  # noqa: E402
from .residuals import marker_residuals, reprojection_residuals  # noqa: E402
from .skeleton import (  # noqa: E402
    Body, Joint, JointKind, PoseState, ScaleGroup, Site, Skeleton, clamp_to_limits,
    forward_kinematics, limit_penalty, pose_jacobian,
)
from .solver import (  # noqa: E402
    SolveConfig, StageSpec, default_monocular_config, default_multiview_config, lm_step, run_staged,
)
from .synth import SceneSpec, generate_scene  # noqa: E402

__all__ = [
    "Camera", "CameraRig", "gc_at_threshold", "project", "robust_triangulate",
    "MarkerFrame", "MultiviewFrame",
    "CorrespondenceTable", "discover_correspondences", "refine_sites_em",
    "AlignmentRegion", "cross_view_consistency", "joint_angle_mae", "pa_mpjpe", "procrustes_align",
    "solve_monocular", "solve_multiview",
    "marker_residuals", "reprojection_residuals",
    "Body", "Joint", "JointKind", "PoseState", "ScaleGroup", "Site", "Skeleton", "clamp_to_limits",
    "forward_kinematics", "limit_penalty", "pose_jacobian",
    "SolveConfig", "StageSpec", "default_monocular_config", "default_multiview_config", "lm_step",
    "run_staged", "SceneSpec", "generate_scene",
]
