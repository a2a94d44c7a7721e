"""Scalable articulated kinematic tree.

A :class:`Skeleton` is an ordered list of bodies (parents before children), one
joint per body, named marker sites rigidly attached to bodies and named scale
groups. Coordinates are SI: meters and radians. Ball and free-root rotations are
parameterised by exponential-map rotation vectors.

The parameter vector used throughout the package is laid out as::

    [ q (nq) | scales (n_groups) | offsets (3 * n_sites, site-major) ]
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .rotations import axis_angle, exp_map, left_jacobian


class SkeletonError(ValueError):
    """Malformed skeleton definition."""


class InvalidPoseError(ValueError):
    """Pose dimensions do not match the skeleton."""


class JointKind(str, enum.Enum):
    FREE = "free"
    BALL = "ball"
    HINGE = "hinge"
    SLIDE = "slide"

    @property
    def ndof(self):
        return {"free": 6, "ball": 3, "hinge": 1, "slide": 1}[self.value]


@dataclass(frozen=True)
class Joint:
    """Joint connecting a body to its parent.

    ``lower``/``upper`` hold one bound per DOF; ``None`` marks an unlimited DOF.
    Free-root joints are always unlimited.
    """

    kind: JointKind
    axis: tuple[float, float, float] | None = None
    lower: tuple[float | None, ...] | None = None
    upper: tuple[float | None, ...] | None = None

    def bounds(self):
        n = self.kind.ndof
        lo = self.lower if self.lower is not None else (None,) * n
        hi = self.upper if self.upper is not None else (None,) * n
        lo = np.array([-np.inf if v is None else v for v in lo], dtype=float)
        hi = np.array([np.inf if v is None else v for v in hi], dtype=float)
        return lo, hi


@dataclass(frozen=True)
class Body:
    name: str
    parent: str | None
    translation: tuple[float, float, float]
    joint: Joint


@dataclass(frozen=True)
class Site:
    name: str
    body: str
    offset: tuple[float, float, float]


@dataclass(frozen=True)
class ScaleGroup:
    name: str
    bodies: tuple[str, ...]


@dataclass(frozen=True)
class Skeleton:
    bodies: tuple[Body, ...]
    sites: tuple[Site, ...]
    scale_groups: tuple[ScaleGroup, ...] = ()
    core_sites: tuple[str, ...] = ()
    name: str = "skeleton"

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if not self.bodies:
            raise SkeletonError("skeleton has no bodies")
        body_index = {}
        parents = []
        for i, b in enumerate(self.bodies):
            if b.name in body_index:
                raise SkeletonError(f"duplicate body name {b.name!r}")
            if b.parent is None:
                parents.append(-1)
            else:
                if b.parent not in body_index:
                    raise SkeletonError(
                        f"body {b.name!r}: parent {b.parent!r} must be defined before it")
                parents.append(body_index[b.parent])
            body_index[b.name] = i
        roots = [i for i, p in enumerate(parents) if p < 0]
        if roots != [0]:
            raise SkeletonError("exactly one root body is required and it must come first")
        kinds = [b.joint.kind for b in self.bodies]
        if kinds[0] is not JointKind.FREE or kinds.count(JointKind.FREE) != 1:
            raise SkeletonError("the root body, and only the root, must carry a free joint")
        for b in self.bodies:
            j = b.joint
            if j.kind in (JointKind.HINGE, JointKind.SLIDE):
                if j.axis is None or abs(np.linalg.norm(j.axis) - 1.0) > 1e-9:
                    raise SkeletonError(f"joint of {b.name!r} needs a unit axis")
            if j.kind is JointKind.FREE and (j.lower is not None or j.upper is not None):
                raise SkeletonError("free root joint cannot carry limits")
            for bound in (j.lower, j.upper):
                if bound is not None and len(bound) != j.kind.ndof:
                    raise SkeletonError(f"joint of {b.name!r}: limit length != {j.kind.ndof}")
            lo, hi = j.bounds()
            if np.any(lo > hi):
                raise SkeletonError(f"joint of {b.name!r}: lower limit exceeds upper")

        site_index = {}
        for i, s in enumerate(self.sites):
            if s.name in site_index:
                raise SkeletonError(f"duplicate site name {s.name!r}")
            if s.body not in body_index:
                raise SkeletonError(f"site {s.name!r} references unknown body {s.body!r}")
            site_index[s.name] = i
        group_of_body = np.full(len(self.bodies), -1, dtype=int)
        group_index = {}
        for g, grp in enumerate(self.scale_groups):
            if grp.name in group_index:
                raise SkeletonError(f"duplicate scale group {grp.name!r}")
            group_index[grp.name] = g
            for bn in grp.bodies:
                if bn not in body_index:
                    raise SkeletonError(f"scale group {grp.name!r}: unknown body {bn!r}")
                if group_of_body[body_index[bn]] >= 0:
                    raise SkeletonError(f"body {bn!r} appears in two scale groups")
                group_of_body[body_index[bn]] = g
        for s in self.core_sites:
            if s not in site_index:
                raise SkeletonError(f"core site {s!r} is not a site")

        nb = len(self.bodies)
        q_start = np.zeros(nb, dtype=int)
        coord_names, coord_body, lower, upper = [], [], [], []
        n = 0
        for i, b in enumerate(self.bodies):
            q_start[i] = n
            n += b.joint.kind.ndof
            coord_names.extend(_coord_names(b))
            coord_body.extend([i] * b.joint.kind.ndof)
            lo, hi = b.joint.bounds()
            lower.extend(lo)
            upper.extend(hi)

        site_body = np.array([body_index[s.body] for s in self.sites], dtype=int)
        # subtree membership: ancestors[b] is the set of bodies on the root path of b
        ancestors = []
        for i in range(nb):
            chain = [i]
            while parents[chain[-1]] >= 0:
                chain.append(parents[chain[-1]])
            ancestors.append(frozenset(chain))
        subtree_sites = [
            np.array([k for k in range(len(self.sites)) if b in ancestors[site_body[k]]], dtype=int)
            for b in range(nb)
        ]
        set_("body_index", body_index)
        set_("site_index", site_index)
        set_("group_index", group_index)
        set_("parents", np.array(parents, dtype=int))
        set_("q_start", q_start)
        set_("nq", n)
        set_("coord_names", tuple(coord_names))
        set_("coord_body", np.array(coord_body, dtype=int))
        set_("lower", _frozen(np.array(lower)))
        set_("upper", _frozen(np.array(upper)))
        set_("site_body", site_body)
        set_("subtree_sites", subtree_sites)
        set_("ancestors", ancestors)
        set_("group_of_body", group_of_body)
        set_("_translations", _frozen(np.array([b.translation for b in self.bodies], float)))
        set_("_site_offsets", _frozen(np.array([s.offset for s in self.sites], float).reshape(-1, 3)))
        set_("_axes", [None if b.joint.axis is None else np.array(b.joint.axis, float)
                       for b in self.bodies])

    @property
    def n_sites(self):
        return len(self.sites)

    @property
    def n_groups(self):
        return len(self.scale_groups)

    @property
    def n_params(self):
        return self.nq + self.n_groups + 3 * self.n_sites

    @property
    def site_names(self):
        return tuple(s.name for s in self.sites)

    @property
    def limited(self):
        return np.isfinite(self.lower) | np.isfinite(self.upper)

    def coords_of(self, body_name):
        """Indices into q of the DOFs of one joint."""
        i = self.body_index[body_name]
        return np.arange(self.q_start[i], self.q_start[i] + self.bodies[i].joint.kind.ndof)

    def root_coords(self):
        return np.arange(6)

    def zero_pose(self):
        return PoseState.zeros(self)

    def with_site_offsets(self, offsets):
        """Copy of the skeleton with new site local offsets ({name: xyz})."""
        sites = tuple(
            Site(s.name, s.body, tuple(float(v) for v in offsets[s.name])) if s.name in offsets else s
            for s in self.sites)
        return Skeleton(self.bodies, sites, self.scale_groups, self.core_sites, self.name)


def _frozen(a):
    a.setflags(write=False)
    return a


def _coord_names(body):
    kind = body.joint.kind
    if kind is JointKind.FREE:
        return [f"{body.name}_{c}" for c in ("tx", "ty", "tz", "rx", "ry", "rz")]
    if kind is JointKind.BALL:
        return [f"{body.name}_{c}" for c in ("x", "y", "z")]
    return [body.name]


@dataclass(frozen=True)
class PoseState:
    """Generalized coordinates, per-group scale factors and per-site offsets."""

    q: np.ndarray
    scales: np.ndarray
    offsets: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "q", np.array(self.q, dtype=float).reshape(-1))
        object.__setattr__(self, "scales", np.array(self.scales, dtype=float).reshape(-1))
        off = np.zeros((0, 3)) if self.offsets is None else np.array(self.offsets, dtype=float)
        object.__setattr__(self, "offsets", off.reshape(-1, 3))

    @classmethod
    def zeros(cls, skel):
        return cls(np.zeros(skel.nq), np.ones(skel.n_groups), np.zeros((skel.n_sites, 3)))

    def check(self, skel):
        if self.q.shape != (skel.nq,):
            raise InvalidPoseError(f"q has length {self.q.size}, skeleton nq is {skel.nq}")
        if self.scales.shape != (skel.n_groups,):
            raise InvalidPoseError(
                f"{self.scales.size} scale factors for {skel.n_groups} scale groups")
        if self.offsets.shape != (skel.n_sites, 3):
            raise InvalidPoseError(
                f"offsets have shape {self.offsets.shape}, expected ({skel.n_sites}, 3)")
        if np.any(self.scales <= 0) or not np.all(np.isfinite(self.scales)):
            raise InvalidPoseError("scale factors must be positive and finite")
        if not np.all(np.isfinite(self.q)):
            raise InvalidPoseError("q contains non-finite values")

    def vector(self):
        return np.concatenate([self.q, self.scales, self.offsets.reshape(-1)])

    @classmethod
    def from_vector(cls, skel, x):
        nq, ng = skel.nq, skel.n_groups
        return cls(x[:nq].copy(), x[nq:nq + ng].copy(), x[nq + ng:].reshape(-1, 3).copy())

    def replace(self, q=None, scales=None, offsets=None):
        return PoseState(self.q if q is None else q,
                         self.scales if scales is None else scales,
                         self.offsets if offsets is None else offsets)

    def __eq__(self, other):
        if not isinstance(other, PoseState):
            return NotImplemented
        return (np.array_equal(self.q, other.q) and np.array_equal(self.scales, other.scales)
                and np.array_equal(self.offsets, other.offsets))

    __hash__ = None


@dataclass
class Kinematics:
    """World-frame quantities from one forward pass."""

    R: np.ndarray        # (nb, 3, 3) body orientations
    P: np.ndarray        # (nb, 3) body origins (after the joint)
    R_pre: np.ndarray    # (nb, 3, 3) orientation of the frame the joint acts in
    origin: np.ndarray   # (nb, 3) joint centre
    sites: np.ndarray    # (n_sites, 3) site positions


def body_scale(skel, pose):
    s = np.ones(len(skel.bodies))
    mask = skel.group_of_body >= 0
    s[mask] = pose.scales[skel.group_of_body[mask]]
    return s


def kinematics(skel, pose):
    pose.check(skel)
    nb = len(skel.bodies)
    R = np.empty((nb, 3, 3))
    P = np.empty((nb, 3))
    R_pre = np.empty((nb, 3, 3))
    origin = np.empty((nb, 3))
    scale = body_scale(skel, pose)
    q = pose.q
    for i, b in enumerate(skel.bodies):
        p = skel.parents[i]
        t = scale[i] * skel._translations[i]
        qs = q[skel.q_start[i]:skel.q_start[i] + b.joint.kind.ndof]
        kind = b.joint.kind
        if p < 0:
            Rp = np.eye(3)
            o = t + qs[:3]
        else:
            Rp = R[p]
            o = P[p] + Rp @ t
        R_pre[i] = Rp
        origin[i] = o
        if kind is JointKind.FREE:
            R[i] = exp_map(qs[3:])
            P[i] = o
        elif kind is JointKind.BALL:
            R[i] = Rp @ exp_map(qs)
            P[i] = o
        elif kind is JointKind.HINGE:
            R[i] = Rp @ axis_angle(skel._axes[i], qs[0])
            P[i] = o
        else:
            R[i] = Rp
            P[i] = o + Rp @ (skel._axes[i] * qs[0])
    sb = skel.site_body
    local = scale[sb, None] * skel._site_offsets + pose.offsets
    sites = P[sb] + np.einsum("nij,nj->ni", R[sb], local)
    return Kinematics(R, P, R_pre, origin, sites)


def forward_kinematics(skel, pose):
    """World positions (meters) of every site, as ``{site name: xyz}``."""
    kin = kinematics(skel, pose)
    return {s.name: kin.sites[i].copy() for i, s in enumerate(skel.sites)}


def site_positions(skel, pose, sites=None):
    """Site positions as an (n, 3) array, in the order of ``sites`` (default: all)."""
    kin = kinematics(skel, pose)
    if sites is None:
        return kin.sites
    return kin.sites[site_indices(skel, sites)]


def site_indices(skel, sites):
    try:
        return np.array([skel.site_index[s] for s in sites], dtype=int)
    except KeyError as exc:
        raise KeyError(f"unknown site {exc.args[0]!r}") from None


def full_jacobian(skel, pose, site_idx, q_cols, scale_cols, offset_sites=(), kin=None):
    """Jacobian of stacked site positions with respect to selected parameters.

    ``q_cols`` and ``scale_cols`` are index arrays into q and the scale vector;
    ``offset_sites`` are site indices whose 3 offset components become columns.
    Columns are ordered q, scales, offsets; rows are ``3 * len(site_idx)``.
    """
    if kin is None:
        kin = kinematics(skel, pose)
    site_idx = np.asarray(site_idx, dtype=int)
    m = len(site_idx)
    row_of_site = np.full(skel.n_sites, -1, dtype=int)
    row_of_site[site_idx] = np.arange(m)
    q_cols = np.asarray(q_cols, dtype=int)
    scale_cols = np.asarray(scale_cols, dtype=int)
    offset_sites = np.asarray(offset_sites, dtype=int)
    ncol = len(q_cols) + len(scale_cols) + 3 * len(offset_sites)
    J = np.zeros((m, 3, ncol))
    pts = kin.sites

    col = 0
    for c in q_cols:
        b = skel.coord_body[c]
        k = c - skel.q_start[b]
        rows = row_of_site[skel.subtree_sites[b]]
        keep = rows >= 0
        rows = rows[keep]
        if rows.size:
            sidx = skel.subtree_sites[b][keep]
            kind = skel.bodies[b].joint.kind
            qs = pose.q[skel.q_start[b]:skel.q_start[b] + kind.ndof]
            if kind is JointKind.FREE and k < 3:
                J[rows, k, col] = 1.0
            elif kind is JointKind.SLIDE:
                J[rows, :, col] = kin.R_pre[b] @ skel._axes[b]
            else:
                if kind is JointKind.HINGE:
                    w = kin.R_pre[b] @ skel._axes[b]
                elif kind is JointKind.BALL:
                    w = kin.R_pre[b] @ left_jacobian(qs)[:, k]
                else:
                    w = left_jacobian(qs[3:])[:, k - 3]
                J[rows, :, col] = np.cross(w, pts[sidx] - kin.origin[b])
        col += 1

    for g in scale_cols:
        members = skel.scale_groups[g].bodies
        for bn in members:
            b = skel.body_index[bn]
            rows = row_of_site[skel.subtree_sites[b]]
            rows = rows[rows >= 0]
            if rows.size:
                J[rows, :, col] += kin.R_pre[b] @ skel._translations[b]
        own = np.where(skel.group_of_body[skel.site_body[site_idx]] == g)[0]
        for r in own:
            k = site_idx[r]
            J[r, :, col] += kin.R[skel.site_body[k]] @ skel._site_offsets[k]
        col += 1

    for k in offset_sites:
        r = row_of_site[k]
        if r >= 0:
            J[r, :, col:col + 3] = kin.R[skel.site_body[k]]
        col += 3
    return J.reshape(3 * m, ncol)


def pose_jacobian(skel, pose, sites=None, mask=None):
    """d(stacked site positions)/d(active parameters) over q and scales.

    ``mask`` is a boolean vector of length ``nq + n_groups``; masked-out parameters
    produce no column. Rows are ordered site-major (x, y, z per site).
    """
    pose.check(skel)
    if sites is None:
        sites = skel.site_names
    idx = site_indices(skel, sites)
    if mask is None:
        mask = np.ones(skel.nq + skel.n_groups, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (skel.nq + skel.n_groups,):
        raise InvalidPoseError(f"mask must have length nq + n_groups = {skel.nq + skel.n_groups}")
    if not mask.any():
        raise ValueError("mask selects no parameters")
    cols = np.flatnonzero(mask)
    return full_jacobian(skel, pose, idx, cols[cols < skel.nq], cols[cols >= skel.nq] - skel.nq)


MIN_SCALE = 1e-3


def clamp_to_limits(skel, pose):
    """Project limited coordinates into their bounds; scale factors stay positive.

    Returns the same object when nothing moves, so that clamping an in-limit pose
    is bitwise idempotent.
    """
    pose.check(skel)
    q = np.clip(pose.q, skel.lower, skel.upper)
    scales = np.maximum(pose.scales, MIN_SCALE)
    if np.array_equal(q, pose.q) and np.array_equal(scales, pose.scales):
        return pose
    return PoseState(q, scales, pose.offsets.copy())



def limit_violation(skel, q):
    """Signed one-sided violation per coordinate: positive above upper, negative below lower."""
    above = np.where(q > skel.upper, q - skel.upper, 0.0)
    below = np.where(q < skel.lower, q - skel.lower, 0.0)
    return above + below


def limit_penalty(skel, pose, stiffness=10.0):
    """Soft joint-limit penalty ``sum 0.5 * k * v**2`` and its gradient over q."""
    if stiffness < 0:
        raise ValueError("stiffness must be non-negative")
    pose.check(skel)
    v = limit_violation(skel, pose.q)
    return 0.5 * stiffness * float(v @ v), stiffness * v
