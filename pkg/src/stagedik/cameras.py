"""Pinhole cameras, robust multiview triangulation and the GC@threshold metric.

Conventions: extrinsics map world to camera, ``X_cam = R @ X_world + t``; the
camera frame is right-handed with +z forward, +x right and +y down. Lens
distortion is not modelled, so detections must already be undistorted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InsufficientViewsError(ValueError):
    pass


class DegenerateConsensusError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera {self.id}: focal lengths must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError(f"camera {self.id}: rotation is not proper orthonormal")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (self.id == other.id
                and (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
                and np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)
                and (self.width, self.height) == (other.width, other.height))

    __hash__ = None

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self):
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, id, position, target, up=(0.0, 0.0, 1.0), fx=1000.0, fy=None,
                width=1920, height=1080, cx=None, cy=None):
        position = np.asarray(position, float)
        z = np.asarray(target, float) - position
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, float))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(id, float(fx), float(fx if fy is None else fy),
                   float(width / 2 if cx is None else cx), float(height / 2 if cy is None else cy),
                   R, -R @ position, int(width), int(height))

    def to_camera(self, points):
        return np.asarray(points, float) @ self.R.T + self.t

    def project_points(self, points):
        """Pixel coordinates (n, 2), depths (n,) and validity mask (depth > 0)."""
        Xc = self.to_camera(np.atleast_2d(points))
        z = Xc[:, 2]
        valid = z > 0
        zs = np.where(valid, z, 1.0)
        uv = np.stack([self.fx * Xc[:, 0] / zs + self.cx, self.fy * Xc[:, 1] / zs + self.cy], axis=1)
        uv[~valid] = np.nan
        return uv, z, valid

    def projection_jacobian(self, points):
        """d(pixel)/d(world point), shape (n, 2, 3). Rows for invalid points are zero."""
        Xc = self.to_camera(np.atleast_2d(points))
        z = Xc[:, 2]
        valid = z > 0
        zs = np.where(valid, z, 1.0)
        n = len(Xc)
        D = np.zeros((n, 2, 3))
        D[:, 0, 0] = self.fx / zs
        D[:, 0, 2] = -self.fx * Xc[:, 0] / zs ** 2
        D[:, 1, 1] = self.fy / zs
        D[:, 1, 2] = -self.fy * Xc[:, 1] / zs ** 2
        D[~valid] = 0.0
        return D @ self.R

    def in_image(self, uv):
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0) & (uv[:, 0] < self.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < self.height))


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    units: str = "m"
    source: str = ""
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("a rig needs at least one camera")
        index = {}
        for i, c in enumerate(self.cameras):
            if c.id in index:
                raise ValueError(f"duplicate camera id {c.id!r}")
            index[c.id] = i
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "_index", index)

    def __getitem__(self, cam_id):
        try:
            return self.cameras[self._index[cam_id]]
        except KeyError:
            raise KeyError(f"camera {cam_id!r} not in rig") from None

    def __contains__(self, cam_id):
        return cam_id in self._index

    def __len__(self):
        return len(self.cameras)

    @property
    def ids(self):
        return [c.id for c in self.cameras]


def project(cam, point):
    """Project one world point: returns (pixel uv, depth, valid)."""
    uv, z, valid = cam.project_points(np.asarray(point, float).reshape(1, 3))
    return uv[0], float(z[0]), bool(valid[0])


@dataclass
class Triangulation:
    point: np.ndarray
    weights: dict[str, float]
    errors: dict[str, float]
    iterations: int


def _dlt(cams, uvs, weights):
    rows = []
    for cam, uv, w in zip(cams, uvs, weights):
        if w <= 0:
            continue
        # normalised image coordinates keep rows of comparable magnitude
        xn = (uv[0] - cam.cx) / cam.fx
        yn = (uv[1] - cam.cy) / cam.fy
        P = np.hstack([cam.R, cam.t[:, None]])
        for r in (xn * P[2] - P[0], yn * P[2] - P[1]):
            rows.append(w * r / np.linalg.norm(r))
    A = np.array(rows)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        raise DegenerateConsensusError("triangulated point at infinity")
    return X[:3] / X[3]


def robust_triangulate(rig, detections, sigma=10.0, max_iter=10, tol=1e-6):
    """Iteratively reweighted linear triangulation of one keypoint.

    ``detections`` maps camera id to ``(uv, confidence)``. Each round reprojects
    the current point, sets ``w_c = confidence_c * exp(-e_c**2 / (2 sigma**2))``
    and re-solves the weighted DLT, stopping when the point moves less than
    ``tol`` meters or after ``max_iter`` rounds.
    """
    ids = [c for c, (_, conf) in detections.items() if conf > 0]
    if len(ids) < 2:
        raise InsufficientViewsError(f"need >= 2 cameras with positive confidence, got {len(ids)}")
    cams = [rig[c] for c in ids]
    uvs = [np.asarray(detections[c][0], float) for c in ids]
    conf = np.array([detections[c][1] for c in ids], float)

    X = _dlt(cams, uvs, conf)
    w = conf.copy()
    errs = np.zeros(len(ids))
    it = 0
    for it in range(1, max_iter + 1):
        for i, (cam, uv) in enumerate(zip(cams, uvs)):
            proj, _, ok = cam.project_points(X[None])
            errs[i] = np.linalg.norm(proj[0] - uv) if ok[0] else np.inf
        w = conf * np.exp(-errs ** 2 / (2.0 * sigma ** 2))
        if np.count_nonzero(w >= 1e-6) < 2:
            raise DegenerateConsensusError("camera weights collapsed; no geometric consensus")
        X_new = _dlt(cams, uvs, w)
        moved = np.linalg.norm(X_new - X)
        X = X_new
        if moved < tol:
            break
    for i, (cam, uv) in enumerate(zip(cams, uvs)):
        proj, _, ok = cam.project_points(X[None])
        errs[i] = np.linalg.norm(proj[0] - uv) if ok[0] else np.inf
    weights = {c: float(v) for c, v in zip(ids, w)}
    for c, (_, cf) in detections.items():
        weights.setdefault(c, 0.0)
    return Triangulation(X, weights, {c: float(e) for c, e in zip(ids, errs)}, it)


def gc_at_threshold(rig, world_points, detections, threshold=10.0):
    """Fraction of confident (camera, site) pairs reprojecting strictly within ``threshold`` px."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    hits = total = 0
    for cam_id, site, uv, conf in detections.pairs():
        if conf <= 0 or site not in world_points:
            continue
        total += 1
        proj, _, ok = rig[cam_id].project_points(np.asarray(world_points[site])[None])
        if ok[0] and np.linalg.norm(proj[0] - uv) < threshold:
            hits += 1
    if total == 0:
        raise UndefinedMetricError("no confidence-positive (camera, site) pairs to score")
    return hits / total
