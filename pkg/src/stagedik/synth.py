"""Synthetic scenes: ground-truth poses, noisy 3D markers and multi-camera detections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import Camera, CameraRig
from .frames import MarkerFrame, MultiviewFrame
from .skeleton import JointKind, PoseState, site_positions

BALL_SINGULARITY_MARGIN = 1e-2


class SceneSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    skeleton: object
    range_fraction: float = 0.9
    unlimited_range: float = 1.0
    root_center: tuple = (0.0, 0.0, 1.0)
    root_translation_range: float = 0.2
    root_rotation_range: float = 0.5
    scale_range: float = 0.0
    marker_sigma_mm: float = 0.0
    pixel_sigma: float = 0.0
    dropout: float = 0.0
    camera_dropout: dict = field(default_factory=dict)
    low_confidence_rate: float = 0.0
    n_cameras: int = 8
    rig_radius: float = 3.0
    rig_height: float = 1.6
    focal: float = 1400.0
    image_size: tuple = (1920, 1080)
    static: bool = False
    site_displacements: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self, multiview):
        for name in ("marker_sigma_mm", "pixel_sigma", "scale_range", "root_translation_range",
                     "root_rotation_range", "unlimited_range"):
            if getattr(self, name) < 0:
                raise SceneSpecError(f"{name} must be >= 0")
        if not 0 < self.range_fraction <= 1:
            raise SceneSpecError("range_fraction must be in (0, 1]")
        for p in [self.dropout, self.low_confidence_rate, *self.camera_dropout.values()]:
            if not 0 <= p <= 1:
                raise SceneSpecError("dropout probabilities must lie in [0, 1]")
        if multiview and self.n_cameras < 1:
            raise SceneSpecError("multiview detections requested with zero cameras")


@dataclass
class Scene:
    truth: list
    markers: list
    multiview: list | None
    rig: CameraRig | None


def ring_rig(n, radius, height, target, focal=1400.0, image_size=(1920, 1080)):
    cams = []
    for i in range(n):
        phi = 2.0 * np.pi * i / n
        pos = (radius * np.cos(phi), radius * np.sin(phi), height)
        cams.append(Camera.look_at(f"cam{i}", pos, target, fx=focal,
                                   width=image_size[0], height=image_size[1]))
    return CameraRig(tuple(cams), units="m", source="synthetic ring")


def sample_pose(skel, rng, spec):
    """Uniform per-DOF sample inside a centred fraction of each joint range."""
    while True:
        q = np.zeros(skel.nq)
        for i in range(skel.nq):
            lo, hi = skel.lower[i], skel.upper[i]
            if i < 3:
                q[i] = spec.root_center[i] + rng.uniform(-1, 1) * spec.root_translation_range
            elif i < 6:
                q[i] = rng.uniform(-1, 1) * spec.root_rotation_range
            elif np.isfinite(lo) and np.isfinite(hi):
                mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * spec.range_fraction
                q[i] = mid + rng.uniform(-half, half)
            else:
                base = lo if np.isfinite(lo) else hi if np.isfinite(hi) else 0.0
                span = spec.unlimited_range * spec.range_fraction
                q[i] = base + (rng.uniform(0, span) if np.isfinite(lo) else
                               -rng.uniform(0, span) if np.isfinite(hi) else rng.uniform(-span, span))
        if not _near_singular(skel, q):
            break
    scales = 1.0 + rng.uniform(-1, 1, size=skel.n_groups) * spec.scale_range
    return PoseState(q, scales, np.zeros((skel.n_sites, 3)))


def _near_singular(skel, q):
    for i, b in enumerate(skel.bodies):
        if b.joint.kind in (JointKind.BALL, JointKind.FREE):
            s = skel.q_start[i] + (3 if b.joint.kind is JointKind.FREE else 0)
            if np.linalg.norm(q[s:s + 3]) > np.pi - BALL_SINGULARITY_MARGIN:
                return True
    return False


def generate_scene(spec, frames, multiview=True):
    """Deterministic synthetic scene for ``frames`` time samples."""
    if frames < 1:
        raise SceneSpecError("frames must be >= 1")
    spec.validate(multiview)
    skel = spec.skeleton
    rng = np.random.default_rng(spec.seed)
    gen_skel = skel
    if spec.site_displacements:
        moved = {s: np.array(skel.sites[skel.site_index[s]].offset) + np.asarray(d, float)
                 for s, d in spec.site_displacements.items()}
        gen_skel = skel.with_site_offsets(moved)
    rig = None
    if multiview:
        rig = ring_rig(spec.n_cameras, spec.rig_radius, spec.rig_height, spec.root_center,
                       spec.focal, spec.image_size)

    truth, markers, views = [], [], []
    names = list(skel.site_names)
    static_pose = sample_pose(skel, rng, spec) if spec.static else None
    for f in range(frames):
        fid = str(f)
        pose = static_pose if spec.static else sample_pose(skel, rng, spec)
        truth.append(pose)
        pts = site_positions(gen_skel, pose)
        noisy = pts + rng.normal(scale=spec.marker_sigma_mm / 1000.0, size=pts.shape)
        markers.append(MarkerFrame({n: noisy[i] for i, n in enumerate(names)},
                                   {n: 1.0 for n in names}, fid))
        if not multiview:
            continue
        dets, confs = {}, {}
        for cam in rig.cameras:
            uv, _, ok = cam.project_points(pts)
            uv = np.where(ok[:, None], uv, -1.0)
            uv = uv + rng.normal(scale=spec.pixel_sigma, size=uv.shape)
            drop_p = spec.camera_dropout.get(cam.id, spec.dropout)
            dropped = rng.uniform(size=len(names)) < drop_p
            low = rng.uniform(size=len(names)) < spec.low_confidence_rate
            low_val = rng.uniform(0.05, 0.2, size=len(names))
            inside = ok & cam.in_image(uv)
            conf = np.where(low, low_val, 1.0)
            conf = np.where(dropped | ~inside, 0.0, conf)
            dets[cam.id] = {n: uv[i] for i, n in enumerate(names)}
            confs[cam.id] = {n: float(conf[i]) for i, n in enumerate(names)}
        views.append(MultiviewFrame(dets, confs, fid))
    return Scene(truth, markers, views if multiview else None, rig)


def inject_outliers(frames, camera, displacement_px, seed=0, sites=None):
    """Copy of ``frames`` with one camera's detections moved by exactly ``displacement_px``."""
    rng = np.random.default_rng(seed)
    out = []
    for fr in frames:
        dets = {c: dict(d) for c, d in fr.detections.items()}
        for s in list(dets[camera]):
            if sites is not None and s not in sites:
                continue
            a = rng.uniform(0, 2 * np.pi)
            dets[camera][s] = dets[camera][s] + displacement_px * np.array([np.cos(a), np.sin(a)])
        out.append(MultiviewFrame(dets, fr.confidences, fr.frame_id))
    return out
