"""End-to-end per-frame solves built on the staged LM engine."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cameras import DegenerateConsensusError, InsufficientViewsError, gc_at_threshold, robust_triangulate
from .residuals import MarkerObjective, ReprojectionObjective
from .skeleton import forward_kinematics
from .solver import (
    CONFIDENCE_CUTOFF, WarmStart, default_monocular_config, default_multiview_config, run_staged,
)

log = logging.getLogger(__name__)


@dataclass
class Preprocessed:
    frame: object                       # MultiviewFrame with final per-pair weights
    gated: object                       # MultiviewFrame after the confidence/image gate only
    zeroed: int = 0
    anchors: dict = field(default_factory=dict)
    camera_weights: dict = field(default_factory=dict)
    untriangulated: list = field(default_factory=list)


def preprocess_multiview(frame, rig, cutoff=CONFIDENCE_CUTOFF, sigma=10.0, robust=True):
    """Gate low-confidence / out-of-image detections, then reweight by triangulation consensus.

    Returns per-pair weights ``confidence * exp(-e^2 / (2 sigma^2))`` where ``e``
    is the reprojection error of the robustly triangulated keypoint, the
    triangulated points (used to recentre the warm start) and the number of
    detections zeroed by the gate.
    """
    cutoff = 0.0 if cutoff is None else cutoff
    gated = {}
    zeroed = 0
    for cam_id, det in frame.detections.items():
        cam = rig[cam_id]
        conf = {}
        for site, uv in det.items():
            c = frame.confidences[cam_id][site]
            if c > 0 and (c < cutoff or not bool(cam.in_image(uv)[0])):
                zeroed += 1
                c = 0.0
            conf[site] = c
        gated[cam_id] = conf
    gated_frame = frame.with_confidences(gated)
    weights = {c: dict(v) for c, v in gated.items()}
    anchors, untri = {}, []
    per_cam = {c: [] for c in frame.detections}
    for site in frame.sites:
        obs = gated_frame.for_site(site)
        try:
            tri = robust_triangulate(rig, obs, sigma=sigma)
        except (InsufficientViewsError, DegenerateConsensusError):
            untri.append(site)
            continue
        anchors[site] = tri.point
        for cam_id, (_, conf) in obs.items():
            if conf > 0:
                if robust:
                    weights[cam_id][site] = tri.weights[cam_id]
                per_cam[cam_id].append(tri.weights[cam_id] / conf)
    camera_weights = {c: (float(np.mean(v)) if v else 0.0) for c, v in per_cam.items()}
    return Preprocessed(frame.with_confidences(weights), gated_frame, zeroed, anchors,
                        camera_weights, untri)


def solve_monocular(skel, frame, config=None, warm_pose=None):
    config = config or default_monocular_config(skel)
    if warm_pose is not None:
        config.warm_start = WarmStart(warm_pose, config.warm_start.recenter)
    objective = MarkerObjective(skel, frame, config.limit_stiffness)
    return run_staged(skel, frame, config, objective=objective)


@dataclass
class MultiviewResult:
    report: object
    prep: Preprocessed
    gc10: float


def solve_multiview(skel, frame, rig, config=None, warm_pose=None, robust=True):
    if len(frame.cameras) < 2:
        raise InsufficientViewsError("multiview solve needs at least two cameras")
    config = config or default_multiview_config(skel)
    if warm_pose is not None:
        config.warm_start = WarmStart(warm_pose, config.warm_start.recenter)
    prep = preprocess_multiview(frame, rig, config.confidence_cutoff, config.kernel_sigma, robust)
    objective = ReprojectionObjective(skel, prep.frame, rig, config.limit_stiffness, prep.anchors)
    report = run_staged(skel, None, config, objective=objective)
    pts = forward_kinematics(skel, report.final_pose)
    gc = gc_at_threshold(rig, pts, prep.gated, 10.0)
    return MultiviewResult(report, prep, gc)
