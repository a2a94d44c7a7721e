"""Weighted residual blocks for 3D marker fitting and multiview reprojection.

Every row is pre-multiplied by the square root of its weight, so the squared
norm of ``ResidualBlock.values`` is exactly the weighted objective:

* marker fitting: ``sum_i w_i ||p_i(q) - target_i||^2 + reg * ||offsets||^2``
* reprojection:   ``sum_{c,k} w_ck ||proj_c(p_k(q)) - y_ck||^2 + reg * ||offsets||^2``

plus, when a stiffness is given, the one-sided limit penalty ``0.5 k v^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import MarkerFrame, MultiviewFrame
from .skeleton import full_jacobian, kinematics, limit_violation, site_indices

__all__ = [
    "MarkerFrame", "MultiviewFrame", "ResidualBlock", "param_mask", "marker_residuals",
    "reprojection_residuals", "MarkerObjective", "ReprojectionObjective",
]


@dataclass
class ResidualBlock:
    values: np.ndarray
    jacobian: np.ndarray | None
    weights: np.ndarray
    columns: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.jacobian is not None and self.jacobian.shape[0] != self.values.shape[0]:
            raise ValueError("jacobian rows must match residual length")
        if self.weights.shape != self.values.shape:
            raise ValueError("one weight per residual row is required")

    @property
    def loss(self):
        return float(self.values @ self.values)


def param_mask(skel, q="all", scales=False, offsets=False):
    """Boolean mask over the full parameter vector.

    ``q`` is ``"all"``, ``"root"``, ``"none"`` or an iterable of coordinate or
    joint (body) names. ``offsets`` is a bool or an iterable of site names.
    """
    mask = np.zeros(skel.n_params, dtype=bool)
    if isinstance(q, str):
        if q == "all":
            mask[:skel.nq] = True
        elif q == "root":
            mask[:6] = True
        elif q != "none":
            raise ValueError(f"unknown q selector {q!r}")
    else:
        names = {n: i for i, n in enumerate(skel.coord_names)}
        for n in q:
            if n in names:
                mask[names[n]] = True
            elif n in skel.body_index:
                mask[skel.coords_of(n)] = True
            else:
                raise KeyError(f"unknown coordinate or joint {n!r}")
    if scales:
        mask[skel.nq:skel.nq + skel.n_groups] = True
    base = skel.nq + skel.n_groups
    if offsets is True:
        mask[base:] = True
    elif offsets:
        for k in site_indices(skel, offsets):
            mask[base + 3 * k: base + 3 * k + 3] = True
    return mask


def _split_mask(skel, mask, observed):
    """Active q indices, scale indices and offset sites (restricted to observed sites)."""
    if mask is None:
        mask = param_mask(skel, "all")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (skel.n_params,):
        raise ValueError(f"active mask must have length {skel.n_params}")
    nq, ng = skel.nq, skel.n_groups
    q_cols = np.flatnonzero(mask[:nq])
    s_cols = np.flatnonzero(mask[nq:nq + ng])
    off = mask[nq + ng:].reshape(-1, 3).any(axis=1)
    obs = np.zeros(skel.n_sites, dtype=bool)
    obs[observed] = True
    off_sites = np.flatnonzero(off & obs)
    columns = np.concatenate([
        q_cols, nq + s_cols,
        (nq + ng + 3 * off_sites[:, None] + np.arange(3)).reshape(-1),
    ]).astype(int)
    return q_cols, s_cols, off_sites, columns


def marker_residuals(skel, pose, frame, active_mask=None, reg_weight=20.0, sites=None,
                     limit_stiffness=0.0, jacobian=True):
    """Residual block of the 3D marker objective.

    Only sites that have a target in ``frame`` (and are in ``sites``, when
    given) produce marker rows; a missing target is equivalent to zero weight.
    """
    if reg_weight < 0:
        raise ValueError("regularisation weight must be >= 0")
    names = [s for s in frame.targets if sites is None or s in sites]
    idx = site_indices(skel, names)
    kin = kinematics(skel, pose)
    w = np.array([frame.confidences[s] for s in names], dtype=float)
    tgt = np.array([frame.targets[s] for s in names], dtype=float).reshape(-1, 3)
    sw = np.sqrt(w)
    vals = [(sw[:, None] * (kin.sites[idx] - tgt)).reshape(-1)]
    wts = [np.repeat(w, 3)]
    q_cols, s_cols, off_sites, columns = _split_mask(skel, active_mask, idx)
    jacs = []
    if jacobian:
        Jp = full_jacobian(skel, pose, idx, q_cols, s_cols, off_sites, kin=kin)
        jacs.append(np.repeat(sw, 3)[:, None] * Jp)
    return _assemble(skel, pose, vals, wts, jacs, q_cols, s_cols, off_sites, columns,
                     reg_weight, limit_stiffness, jacobian, {})


def _assemble(skel, pose, vals, wts, jacs, q_cols, s_cols, off_sites, columns,
              reg_weight, limit_stiffness, jacobian, flags):
    ncol = len(columns)
    if reg_weight > 0:
        vals.append(np.sqrt(reg_weight) * pose.offsets.reshape(-1))
        wts.append(np.full(3 * skel.n_sites, float(reg_weight)))
        if jacobian:
            J = np.zeros((3 * skel.n_sites, ncol))
            base = len(q_cols) + len(s_cols)
            for j, k in enumerate(off_sites):
                J[3 * k:3 * k + 3, base + 3 * j:base + 3 * j + 3] = np.sqrt(reg_weight) * np.eye(3)
            jacs.append(J)
    if limit_stiffness > 0:
        lim = np.flatnonzero(skel.limited)
        v = limit_violation(skel, pose.q)[lim]
        c = np.sqrt(0.5 * limit_stiffness)
        vals.append(c * v)
        wts.append(np.full(len(lim), 0.5 * limit_stiffness))
        if jacobian:
            J = np.zeros((len(lim), ncol))
            col_of_q = {int(qc): j for j, qc in enumerate(q_cols)}
            for r, (qi, vi) in enumerate(zip(lim, v)):
                if vi != 0 and qi in col_of_q:
                    J[r, col_of_q[qi]] = c
            jacs.append(J)
    values = np.concatenate(vals)
    J = np.vstack(jacs) if jacobian else None
    return ResidualBlock(values, J, np.concatenate(wts), columns, flags)


def reprojection_residuals(skel, pose, frame, rig, active_mask=None, reg_weight=0.0, sites=None,
                           limit_stiffness=0.0, jacobian=True):
    """Residual block of the multiview reprojection objective.

    A site behind a camera gets zero weight for that camera, and the pair is
    listed in ``flags["behind_camera"]``.
    """
    if reg_weight < 0:
        raise ValueError("regularisation weight must be >= 0")
    for c in frame.cameras:
        if c not in rig:
            raise KeyError(f"camera {c!r} not in rig")
    names = [s for s in frame.sites if sites is None or s in sites]
    idx = site_indices(skel, names)
    kin = kinematics(skel, pose)
    pts = kin.sites[idx]
    q_cols, s_cols, off_sites, columns = _split_mask(skel, active_mask, idx)
    Jp = full_jacobian(skel, pose, idx, q_cols, s_cols, off_sites, kin=kin) if jacobian else None
    row_of = {s: i for i, s in enumerate(names)}
    vals, wts, jacs = [], [], []
    behind = []
    for cam_id, det in frame.detections.items():
        cam = rig[cam_id]
        conf = frame.confidences[cam_id]
        use = [s for s in det if s in row_of]
        if not use:
            continue
        rows = np.array([row_of[s] for s in use], dtype=int)
        uv, _, ok = cam.project_points(pts[rows])
        w = np.array([conf[s] for s in use], dtype=float)
        for s, good in zip(use, ok):
            if not good:
                behind.append((cam_id, s))
        w = np.where(ok, w, 0.0)
        y = np.array([det[s] for s in use], dtype=float)
        r = np.where(ok[:, None], uv - y, 0.0)
        sw = np.sqrt(w)
        vals.append((sw[:, None] * r).reshape(-1))
        wts.append(np.repeat(w, 2))
        if jacobian:
            D = cam.projection_jacobian(pts[rows])  # (n, 2, 3)
            Jsite = Jp.reshape(len(names), 3, -1)[rows]  # (n, 3, ncol)
            Jc = np.einsum("nij,njk->nik", D, Jsite) * sw[:, None, None]
            jacs.append(Jc.reshape(2 * len(use), -1))
    if not vals:
        vals.append(np.zeros(0))
        wts.append(np.zeros(0))
        if jacobian:
            jacs.append(np.zeros((0, len(columns))))
    return _assemble(skel, pose, vals, wts, jacs, q_cols, s_cols, off_sites, columns,
                     reg_weight, limit_stiffness, jacobian, {"behind_camera": behind})


class MarkerObjective:
    """3D marker-fitting objective bound to one frame, as consumed by the solver."""

    def __init__(self, skel, frame, limit_stiffness=0.0):
        self.skel = skel
        self.frame = frame
        self.limit_stiffness = limit_stiffness
        unknown = [s for s in frame.targets if s not in skel.site_index]
        if unknown:
            raise KeyError(f"frame sites not in skeleton: {unknown}")

    def block(self, pose, mask, reg_weight, sites=None, jacobian=True):
        return marker_residuals(self.skel, pose, self.frame, mask, reg_weight, sites,
                                self.limit_stiffness, jacobian)

    def observed_sites(self, sites=None):
        return [s for s in self.frame.targets
                if self.frame.confidences[s] > 0 and (sites is None or s in sites)]

    def target_centroid(self, sites=None):
        names = self.observed_sites(sites)
        if not names:
            return None, []
        return np.mean([self.frame.targets[s] for s in names], axis=0), names


class ReprojectionObjective:
    """Multiview reprojection objective for one frame.

    ``anchors`` optionally holds triangulated 3D points used only for warm-start
    recentering.
    """

    def __init__(self, skel, frame, rig, limit_stiffness=0.0, anchors=None):
        self.skel = skel
        self.frame = frame
        self.rig = rig
        self.limit_stiffness = limit_stiffness
        self.anchors = anchors or {}
        unknown = [s for s in frame.sites if s not in skel.site_index]
        if unknown:
            raise KeyError(f"frame sites not in skeleton: {unknown}")

    def block(self, pose, mask, reg_weight, sites=None, jacobian=True):
        return reprojection_residuals(self.skel, pose, self.frame, self.rig, mask, reg_weight,
                                      sites, self.limit_stiffness, jacobian)

    def observed_sites(self, sites=None):
        return [s for s in self.frame.sites
                if any(self.frame.confidences[c].get(s, 0.0) > 0 for c in self.frame.confidences)
                and (sites is None or s in sites)]

    def target_centroid(self, sites=None):
        names = [s for s in self.anchors if sites is None or s in sites]
        if not names:
            return None, []
        return np.mean([self.anchors[s] for s in names], axis=0), names
