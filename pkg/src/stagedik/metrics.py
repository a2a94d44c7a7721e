"""Procrustes alignment and evaluation metrics (millimeters and degrees)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .rotations import exp_map, geodesic_angle
from .skeleton import JointKind

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentRegion:
    """Sites used for the similarity fit, and the sites whose errors are reported."""

    name: str
    sites: tuple
    report_sites: tuple | None = None
    column: str | None = None     # regions sharing a column are averaged together

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if self.report_sites is not None:
            object.__setattr__(self, "report_sites", tuple(self.report_sites))

    @property
    def reported(self):
        return self.sites if self.report_sites is None else self.report_sites


@dataclass
class Similarity:
    scale: float
    R: np.ndarray
    t: np.ndarray
    aligned: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points, float) @ self.R.T + self.t


def _rank(centered, tol=1e-9):
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= 0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def procrustes_align(source, target):
    """Similarity ``s R x + t`` minimising the summed squared distance to ``target``.

    Closed form from the SVD of the centred cross-covariance, with the sign of
    the last singular direction flipped when needed so ``det(R) = +1``.
    """
    X = np.asarray(source, float)
    Y = np.asarray(target, float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise AlignmentError("source and target must be (n, 3) arrays of equal shape")
    n = len(X)
    if n < 3:
        raise AlignmentError("at least three point pairs are required")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    if _rank(Yc) < 2 or _rank(Xc) < 2:
        raise AlignmentError("degenerate (collinear or coincident) point configuration")
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    var_x = float(np.sum(Xc * Xc)) / n
    s = float(np.sum(D * S)) / var_x
    t = my - s * R @ mx
    return Similarity(s, R, t, s * X @ R.T + t)


def _stack(points, sites, label):
    missing = [s for s in sites if s not in points]
    if missing:
        raise EvaluationError(f"{label} is missing sites: {missing}")
    return np.array([points[s] for s in sites], dtype=float).reshape(-1, 3)


def pa_mpjpe(pred, ref, region):
    """Mean per-site error in mm after aligning ``pred`` onto ``ref`` over ``region.sites``.

    ``pred`` and ``ref`` map site names to positions in meters. Returns the mean
    over ``region.reported`` and the per-site errors (mm).
    """
    sites = list(region.sites)
    report = list(region.reported)
    sim = procrustes_align(_stack(pred, sites, "prediction"), _stack(ref, sites, "reference"))
    P = sim.apply(_stack(pred, report, "prediction"))
    Y = _stack(ref, report, "reference")
    err = 1000.0 * np.linalg.norm(P - Y, axis=1)
    return float(err.mean()), dict(zip(report, err.tolist()))


def angle_coords(skel, joints=None):
    """Coordinate indices of angular DOFs (hinge and ball components, root excluded).

    ``joints`` restricts the selection to the named joints (bodies) or coordinates.
    """
    idx = []
    for i, b in enumerate(skel.bodies):
        if b.joint.kind not in (JointKind.HINGE, JointKind.BALL):
            continue
        for c in skel.coords_of(b.name):
            if joints is None or b.name in joints or skel.coord_names[c] in joints:
                idx.append(int(c))
    if joints is not None:
        known = set(skel.body_index) | set(skel.coord_names)
        unknown = [j for j in joints if j not in known]
        if unknown:
            raise EvaluationError(f"unknown joints: {unknown}")
    return idx


def _check_same(skel, poses):
    for p in poses:
        try:
            p.check(skel)
        except ValueError as exc:
            raise EvaluationError(f"pose does not match skeleton {skel.name!r}: {exc}") from None


def joint_angle_errors(skel, pred, ref, joints=None):
    """Per-coordinate absolute differences in degrees, one row per pose pair."""
    pred = [pred] if not isinstance(pred, (list, tuple)) else list(pred)
    ref = [ref] if not isinstance(ref, (list, tuple)) else list(ref)
    if len(pred) != len(ref):
        raise EvaluationError("prediction and reference hold different numbers of poses")
    _check_same(skel, pred + ref)
    idx = angle_coords(skel, joints)
    diff = np.array([np.abs(p.q[idx] - r.q[idx]) for p, r in zip(pred, ref)]).reshape(len(pred), len(idx))
    return [skel.coord_names[i] for i in idx], np.degrees(diff)


def joint_angle_mae(skel, pred, ref, joints=None):
    """Mean absolute joint-angle difference in degrees, per coordinate.

    Ball joints are compared component-wise in the exponential-map
    parameterisation; :func:`ball_geodesic_errors` gives the rotation-angle
    alternative.
    """
    names, diff = joint_angle_errors(skel, pred, ref, joints)
    return dict(zip(names, diff.mean(axis=0).tolist()))


def ball_geodesic_errors(skel, pred, ref, joints=None):
    """Relative rotation angle (degrees) of each ball joint, ``angle(R_pred^T R_ref)``."""
    _check_same(skel, [pred, ref])
    out = {}
    for b in skel.bodies:
        if b.joint.kind is not JointKind.BALL or (joints is not None and b.name not in joints):
            continue
        c = skel.coords_of(b.name)
        out[b.name] = float(np.degrees(geodesic_angle(exp_map(pred.q[c]), exp_map(ref.q[c]))))
    return out


def cross_view_consistency(skel, poses_per_view, joints=None):
    """Population standard deviation (degrees) of each angular coordinate across views."""
    if len(poses_per_view) < 2:
        raise EvaluationError("cross-view consistency needs at least two views")
    _check_same(skel, list(poses_per_view))
    idx = angle_coords(skel, joints)
    q = np.array([p.q[idx] for p in poses_per_view])
    sd = np.degrees(q.std(axis=0, ddof=0))
    return {skel.coord_names[i]: float(v) for i, v in zip(idx, sd)}


def region_columns(regions):
    """Ordered column names; regions without an explicit column report under their own name."""
    cols = []
    for r in regions:
        c = r.column or r.name
        if c not in cols:
            cols.append(c)
    return cols


def evaluate_frame(pred, ref, regions):
    """PA-MPJPE per column for one frame.

    A region with sites missing from either map is dropped (for instance an
    undetected hand); the column then averages the remaining regions.
    Returns ``(values, dropped)`` where ``dropped`` lists region names.
    """
    acc, dropped = {}, []
    for r in regions:
        need = set(r.sites) | set(r.reported)
        if any(s not in pred or s not in ref for s in need):
            dropped.append(r.name)
            continue
        acc.setdefault(r.column or r.name, []).append(pa_mpjpe(pred, ref, r)[0])
    values = {c: float(np.mean(v)) for c, v in acc.items()}
    return values, dropped


def mean_std(values):
    """Mean and population standard deviation, ignoring NaNs; NaN for an empty set."""
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=0))
