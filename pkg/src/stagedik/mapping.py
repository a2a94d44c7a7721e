"""Correspondences between an external keypoint/vertex vocabulary and skeleton sites.

Covers nearest-match discovery from paired recordings and an EM-style
refinement that alternates pose solves with site relocation in body frames.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .frames import MarkerFrame
from .skeleton import kinematics
from .solver import SolveConfig, StageSpec, WarmStart, default_monocular_config, run_staged

log = logging.getLogger(__name__)

KINDS = ("vertex", "regressedKeypoint")
DEFAULT_TAU = 0.02


class NoDataError(ValueError):
    pass


class CorrespondenceError(ValueError):
    pass


class EMDescentError(RuntimeError):
    """The refinement objective went up between rounds."""


def id_key(ext_id):
    """Sort key that orders numeric ids numerically and before non-numeric ones."""
    s = str(ext_id)
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


def kernel_weight(residual, tau=DEFAULT_TAU):
    return math.exp(-residual * residual / (2.0 * tau * tau))


@dataclass(frozen=True)
class Correspondence:
    external_id: str
    site: str
    kind: str = "vertex"
    weight: float = 1.0


@dataclass
class CorrespondenceTable:
    entries: list

    def __post_init__(self):
        self.entries = [e if isinstance(e, Correspondence) else Correspondence(*e)
                        for e in self.entries]
        ext, sites = set(), set()
        for e in self.entries:
            if e.kind not in KINDS:
                raise CorrespondenceError(f"{e.external_id}: kind must be one of {KINDS}")
            if not math.isfinite(e.weight) or e.weight < 0:
                raise CorrespondenceError(f"{e.external_id}: weight must be finite and >= 0")
            if e.external_id in ext:
                raise CorrespondenceError(f"external id {e.external_id!r} mapped twice")
            if e.site in sites:
                raise CorrespondenceError(f"site {e.site!r} mapped twice")
            ext.add(e.external_id)
            sites.add(e.site)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_external(self):
        return {e.external_id: e for e in self.entries}

    def by_site(self):
        return {e.site: e for e in self.entries}

    def with_weights(self, weights):
        """Copy with per-site weights replaced (sites missing from ``weights`` keep theirs)."""
        return CorrespondenceTable([replace(e, weight=float(weights.get(e.site, e.weight)))
                                    for e in self.entries])

    def check_sites(self, skel):
        missing = [e.site for e in self.entries if e.site not in skel.site_index]
        if missing:
            raise CorrespondenceError(f"table sites not in skeleton: {missing}")

    def to_site_frame(self, frame):
        """Translate a frame keyed by external ids into site targets weighted by the table."""
        table = self.by_external()
        targets, conf = {}, {}
        for k, y in frame.targets.items():
            e = table.get(k)
            if e is None:
                continue
            targets[e.site] = y
            conf[e.site] = frame.confidences[k] * e.weight
        return MarkerFrame(targets, conf, frame.frame_id)


def discover_correspondences(external_clouds, reference_markers, pairing, tau=DEFAULT_TAU, kinds=None):
    """Match every reference key to the external key closest to it on average.

    ``external_clouds`` and ``reference_markers`` are per-frame dicts of
    ``key -> xyz``; frames are paired by position in the lists. The mean
    distance of each (reference, external) pair is taken over frames where both
    keys are present. Pairs are assigned greedily in order of increasing mean
    distance, ties going to the lowest external id, so the result is one-to-one.
    """
    if len(external_clouds) != len(reference_markers):
        raise ValueError("external and reference frame lists differ in length")
    frames = [(e, r) for e, r in zip(external_clouds, reference_markers) if e and r]
    if not frames:
        raise NoDataError("no frame holds both an external cloud and reference markers")
    kinds = kinds or {}
    ext_ids = sorted({k for e, _ in frames for k in e}, key=id_key)
    candidates = []
    for ref in pairing:
        for ext in ext_ids:
            d = [np.linalg.norm(np.asarray(e[ext], float) - np.asarray(r[ref], float))
                 for e, r in frames if ext in e and ref in r]
            if d:
                candidates.append((float(np.mean(d)), id_key(ext), str(ref), ext))
    if not candidates:
        raise NoDataError("reference keys never co-occur with any external key")
    candidates.sort()
    used_ext, used_ref, entries = set(), set(), []
    for dist, _, ref, ext in candidates:
        if ext in used_ext or ref in used_ref:
            continue
        used_ext.add(ext)
        used_ref.add(ref)
        entries.append(Correspondence(str(ext), pairing[ref], kinds.get(ext, "vertex"),
                                      kernel_weight(dist, tau)))
    unmatched = [r for r in pairing if str(r) not in used_ref]
    if unmatched:
        log.warning("reference keys left unmatched: %s", unmatched)
    entries.sort(key=lambda e: id_key(e.external_id))
    return CorrespondenceTable(entries)


@dataclass
class EMResult:
    skeleton: object
    table: CorrespondenceTable
    history: list                      # weighted objective before refinement, then after each round
    poses: list                        # E-step poses of the last round
    mean_residuals: dict               # site -> mean distance (m) after the last round
    unobserved: list = field(default_factory=list)
    moved: dict = field(default_factory=dict)   # site -> total offset change (m)


def _objective(skel, poses, frames, sites):
    total = 0.0
    for pose, fr in zip(poses, frames):
        kin = kinematics(skel, pose)
        for s in sites:
            if s in fr.targets:
                d = kin.sites[skel.site_index[s]] - fr.targets[s]
                total += fr.confidences[s] * float(d @ d)
    return total


def _e_step_config(skel, sites, first, iterations):
    if first:
        cfg = default_monocular_config(skel)
        core = [s for s in skel.core_sites if s in sites] or list(sites)
        for st in cfg.stages:
            st.scales = False
            st.offsets = False
            st.sites = core if st.sites == "core" else list(sites)
        return cfg
    stage = StageSpec("pose", iterations, q="all", sites=sites, offset_reg=0.0)
    return SolveConfig([stage], WarmStart(recenter=False))


def refine_sites_em(skel, frames, table, rounds=1, tau=DEFAULT_TAU, refine_kinds=("vertex",),
                    iterations=200, slack=1e-12):
    """Alternate pose solves (E) and site relocation (M) for ``rounds`` rounds.

    ``frames`` are :class:`MarkerFrame` objects keyed by external id. Sites whose
    table kind is in ``refine_kinds`` are relocated; the others act as anchors.
    When anchors exist, the E-step fits poses to them alone so a misplaced site
    cannot drag the pose; otherwise every table site is used. Scales and
    offsets stay frozen throughout.

    The M-step sets each refined site's local offset to the confidence-weighted
    mean of its targets mapped into the owning body's frame. The objective
    (confidence times input table weight times squared distance, over all table
    sites) is recorded before the first relocation and after every round, and
    is checked to be non-increasing. Output weights come
    from the Gaussian kernel of each observed site's final mean residual.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not frames:
        raise ValueError("at least one frame is required")
    table.check_sites(skel)
    site_frames = [table.to_site_frame(f) for f in frames]
    all_sites = [e.site for e in table]
    refine = [e.site for e in table if e.kind in refine_kinds]
    anchors = [s for s in all_sites if s not in refine]
    e_sites = anchors if anchors else all_sites
    observed = {s for fr in site_frames for s, w in fr.confidences.items() if w > 0}
    unobserved = [s for s in refine if s not in observed]
    for s in unobserved:
        log.warning("site %s is never observed; left unchanged", s)

    start = skel
    poses = [None] * len(site_frames)
    history = []
    for rnd in range(rounds):
        new_poses = []
        for i, fr in enumerate(site_frames):
            cfg = _e_step_config(skel, e_sites, rnd == 0, iterations)
            if poses[i] is not None:
                cfg.warm_start = WarmStart(poses[i], False)
            new_poses.append(run_staged(skel, fr, cfg).final_pose)
        poses = new_poses
        if rnd == 0:
            history.append(_objective(skel, poses, site_frames, all_sites))
        kins = [kinematics(skel, p) for p in poses]
        moved = {}
        for s in refine:
            if s in unobserved:
                continue
            k = skel.site_index[s]
            b = skel.site_body[k]
            acc, wsum = np.zeros(3), 0.0
            for pose, kin, fr in zip(poses, kins, site_frames):
                w = fr.confidences.get(s, 0.0)
                if w <= 0:
                    continue
                scale = pose.scales[skel.group_of_body[b]] if skel.group_of_body[b] >= 0 else 1.0
                local = (kin.R[b].T @ (fr.targets[s] - kin.P[b]) - pose.offsets[k]) / scale
                acc += w * local
                wsum += w
            moved[s] = acc / wsum
        skel = skel.with_site_offsets(moved)
        history.append(_objective(skel, poses, site_frames, all_sites))
        if history[-1] > history[-2] + slack * max(1.0, history[-2]):
            raise EMDescentError(
                f"round {rnd + 1}: objective rose from {history[-2]!r} to {history[-1]!r}")

    pts = [kinematics(skel, p).sites for p in poses]
    mean_res = {}
    for s in all_sites:
        k = skel.site_index[s]
        d = [np.linalg.norm(x[k] - fr.targets[s])
             for x, fr in zip(pts, site_frames) if fr.confidences.get(s, 0.0) > 0]
        if d:
            mean_res[s] = float(np.mean(d))
    weights = {s: kernel_weight(r, tau) for s, r in mean_res.items()}
    delta = {s: float(np.linalg.norm(np.subtract(skel.sites[skel.site_index[s]].offset,
                                                 start.sites[start.site_index[s]].offset)))
             for s in refine}
    return EMResult(skel, table.with_weights(weights), history, poses, mean_res, unobserved, delta)
