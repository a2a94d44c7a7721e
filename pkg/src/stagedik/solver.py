"""Damped Levenberg-Marquardt with staged parameter activation.

A solve runs an ordered list of stages. Each stage fixes which parameters move
(root only, all coordinates, scales, per-site offsets), which sites contribute
residuals, the base damping and the offset regularisation weight. Steps solve

    (1 + lam) J^T J dx = -J^T r

over the active columns, i.e. the Gauss-Newton step shrunk by ``1 + lam``, with
a pseudo-inverse so rank-deficient blocks stay well defined. The candidate is clamped to the
joint limits and is accepted only if the loss decreases. Rejections double ``lam``;
acceptances shrink it by 0.9, never below the stage's base damping.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .residuals import MarkerObjective, param_mask
from .rotations import wrap_rotation_vector
from .skeleton import PoseState, clamp_to_limits, site_positions

log = logging.getLogger(__name__)

MONO_DAMPING = 3.0
MONO_ITERATIONS = 400
MONO_OFFSET_REG = 20.0
MULTIVIEW_DAMPING = 1.0
MULTIVIEW_ITERATIONS = 500
MULTIVIEW_SPLIT = (0.3, 0.5, 0.2)
MULTIVIEW_OFFSET_ITERATIONS = 20
MULTIVIEW_OFFSET_REG = 1e4
CONFIDENCE_CUTOFF = 0.25
RCOND = 1e-10


class ConfigError(ValueError):
    pass


class SolveInputError(ValueError):
    pass


class StepFailure(ArithmeticError):
    """Normal equations could not be solved at the current damping."""


@dataclass
class StageSpec:
    name: str
    iterations: int
    q: object = "all"            # "all" | "root" | "none" | list of coordinate/joint names
    scales: bool = False
    offsets: bool = False
    sites: object = None         # None (all observed) | "core" | list of site names
    damping: float = MONO_DAMPING
    offset_reg: float = MONO_OFFSET_REG

    def validate(self):
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"stage {self.name!r}: iteration budget must be an integer >= 1")
        if self.damping < 0:
            raise ConfigError(f"stage {self.name!r}: damping must be >= 0")
        if self.offset_reg < 0:
            raise ConfigError(f"stage {self.name!r}: offset regularisation must be >= 0")

    def mask(self, skel):
        return param_mask(skel, self.q, self.scales, self.offsets)

    def site_filter(self, skel):
        if self.sites is None:
            return None
        if self.sites == "core":
            if not skel.core_sites:
                raise ConfigError("stage uses the core-marker subset but the skeleton has none")
            return set(skel.core_sites)
        missing = [s for s in self.sites if s not in skel.site_index]
        if missing:
            raise ConfigError(f"stage {self.name!r}: unknown sites {missing}")
        return set(self.sites)


@dataclass
class WarmStart:
    pose: PoseState | None = None
    recenter: bool = True


@dataclass
class SolveConfig:
    stages: list
    warm_start: WarmStart = field(default_factory=WarmStart)
    convergence_tol: float = 1e-10
    patience: int = 10
    max_step_norm: float | None = None
    limit_stiffness: float = 10.0
    lambda_up: float = 2.0
    lambda_down: float = 0.9
    confidence_cutoff: float | None = None
    kernel_sigma: float = 10.0

    def validate(self, skel=None):
        if not self.stages:
            raise ConfigError("a solve needs at least one stage")
        for st in self.stages:
            st.validate()
            if skel is not None:
                st.mask(skel)
                st.site_filter(skel)
        if self.limit_stiffness < 0:
            raise ConfigError("limit stiffness must be >= 0")
        if self.max_step_norm is not None and self.max_step_norm <= 0:
            raise ConfigError("max_step_norm must be positive")
        return self

    @property
    def total_iterations(self):
        return sum(s.iterations for s in self.stages)

    def to_dict(self):
        d = {
            "stages": [asdict(s) for s in self.stages],
            "warm_start": {"recenter": self.warm_start.recenter},
        }
        for k in ("convergence_tol", "patience", "max_step_norm", "limit_stiffness",
                  "lambda_up", "lambda_down", "confidence_cutoff", "kernel_sigma"):
            d[k] = getattr(self, k)
        for st in d["stages"]:
            if isinstance(st["q"], tuple):
                st["q"] = list(st["q"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        try:
            stages = [StageSpec(**s) for s in d.pop("stages")]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad stage definition: {exc}") from None
        ws = d.pop("warm_start", {}) or {}
        try:
            cfg = cls(stages, WarmStart(recenter=bool(ws.get("recenter", True))), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()


def default_monocular_config(skel):
    """Three stages sharing 400 iterations evenly at damping 3.0, offset reg 20 in stage 3."""
    if not skel.core_sites:
        raise ConfigError("skeleton has no core-marker designation for stage 1")
    base, extra = divmod(MONO_ITERATIONS, 3)
    budgets = [base] * 3
    budgets[-1] += extra
    kw = dict(damping=MONO_DAMPING, offset_reg=MONO_OFFSET_REG)
    stages = [
        StageSpec("root", budgets[0], q="root", sites="core", **kw),
        StageSpec("pose", budgets[1], q="all", **kw),
        StageSpec("pose_scale_offsets", budgets[2], q="all", scales=True, offsets=True, **kw),
    ]
    return SolveConfig(stages).validate(skel)


def default_multiview_config(skel):
    """30/50/20 split of 500 iterations at damping 1.0, then 20 offset-only iterations."""
    if not skel.core_sites:
        raise ConfigError("skeleton has no core-marker designation for stage 1")
    b = [int(round(f * MULTIVIEW_ITERATIONS)) for f in MULTIVIEW_SPLIT]
    kw = dict(damping=MULTIVIEW_DAMPING, offset_reg=MULTIVIEW_OFFSET_REG)
    stages = [
        StageSpec("root", b[0], q="root", sites="core", **kw),
        StageSpec("pose", b[1], q="all", **kw),
        StageSpec("pose_scale", b[2], q="all", scales=True, **kw),
        StageSpec("offsets", MULTIVIEW_OFFSET_ITERATIONS, q="none", offsets=True, **kw),
    ]
    return SolveConfig(stages, confidence_cutoff=CONFIDENCE_CUTOFF).validate(skel)


def damped_step(J, r, lam):
    """Damped Gauss-Newton step ``-(1 + lam)^-1 (J^T J)^+ J^T r``.

    The pseudo-inverse is taken on the Jacobi-scaled normal matrix, dropping
    eigen-directions below ``RCOND`` times the largest, so unobservable
    parameter combinations do not move. Columns with an all-zero Jacobian are
    frozen. Returns the step over all columns and the reduction in ``||r||^2``
    predicted by the linear model.
    """
    A = J.T @ J
    g = J.T @ r
    d = np.diag(A).copy()
    live = d > 0
    dx = np.zeros(J.shape[1])
    if not live.any():
        return dx, 0.0
    s = 1.0 / np.sqrt(d[live])
    B = s[:, None] * A[np.ix_(live, live)] * s[None, :]
    try:
        w, V = np.linalg.eigh(B)
    except np.linalg.LinAlgError:
        raise StepFailure("eigen-decomposition of the normal matrix failed") from None
    keep = w > RCOND * w[-1]
    Vk = V[:, keep]
    dx[live] = -s * (Vk @ ((Vk.T @ (s * g[live])) / w[keep])) / (1.0 + lam)
    if not np.all(np.isfinite(dx)):
        raise StepFailure("non-finite step")
    pred = -(2.0 * g @ dx + dx @ A @ dx)
    return dx, float(pred)


@dataclass
class LMStep:
    candidate: PoseState
    predicted_reduction: float
    step: np.ndarray
    loss: float


def apply_step(skel, pose, columns, dx):
    x = pose.vector()
    x[columns] += dx
    cand = PoseState.from_vector(skel, x)
    if np.any(columns[:, None] == np.arange(3, 6)):
        w = cand.q[3:6]
        if np.linalg.norm(w) > np.pi:
            q = cand.q.copy()
            q[3:6] = wrap_rotation_vector(w)
            cand = cand.replace(q=q)
    return clamp_to_limits(skel, cand)


def lm_step(skel, residual_fn, pose, lam, max_step_norm=None, block=None):
    """One damped LM step: returns the clamped candidate and the predicted reduction."""
    if lam < 0:
        raise ValueError("damping must be >= 0")
    if block is None:
        block = residual_fn(pose)
    dx, pred = damped_step(block.jacobian, block.values, lam)
    norm = float(np.linalg.norm(dx))
    if max_step_norm is not None and norm > max_step_norm:
        dx = dx * (max_step_norm / norm)
        J, r = block.jacobian, block.values
        pred = float(-(2.0 * (J.T @ r) @ dx + dx @ (J.T @ J) @ dx))
    if not dx.any():
        return LMStep(pose, 0.0, dx, block.loss)
    return LMStep(apply_step(skel, pose, block.columns, dx), pred, dx, block.loss)


@dataclass
class StageTrace:
    name: str
    start_loss: float
    end_loss: float
    iterations: list = field(default_factory=list)
    accepted: int = 0
    converged: bool = True
    stop_reason: str = "budget"


@dataclass
class SolveReport:
    final_pose: PoseState
    stages: list
    stage_poses: list
    converged: bool
    final_loss: float
    initial_pose: PoseState
    wall_time: float = 0.0
    diagnostics: list = field(default_factory=list)

    def to_dict(self, skel):
        """JSON-ready summary; wall time is left out so reports are reproducible."""
        return {
            "converged": self.converged,
            "final_loss": self.final_loss,
            "pose": pose_to_dict(skel, self.final_pose),
            "stages": [
                {"name": s.name, "start_loss": s.start_loss, "end_loss": s.end_loss,
                 "accepted": s.accepted, "converged": s.converged,
                 "stop_reason": s.stop_reason, "iterations": s.iterations}
                for s in self.stages
            ],
            "diagnostics": list(self.diagnostics),
        }


def pose_to_dict(skel, pose):
    return {
        "q": {n: float(v) for n, v in zip(skel.coord_names, pose.q)},
        "scales": {g.name: float(v) for g, v in zip(skel.scale_groups, pose.scales)},
        "offsets": {s.name: [float(v) for v in pose.offsets[i]]
                    for i, s in enumerate(skel.sites) if pose.offsets[i].any()},
    }


def pose_from_dict(skel, d):
    pose = PoseState.zeros(skel)
    q, scales, offsets = pose.q.copy(), pose.scales.copy(), pose.offsets.copy()
    names = {n: i for i, n in enumerate(skel.coord_names)}
    for n, v in d.get("q", {}).items():
        q[names[n]] = v
    for n, v in d.get("scales", {}).items():
        scales[skel.group_index[n]] = v
    for n, v in d.get("offsets", {}).items():
        offsets[skel.site_index[n]] = v
    return PoseState(q, scales, offsets)


def warm_start_pose(skel, objective, config):
    pose = config.warm_start.pose or PoseState.zeros(skel)
    pose.check(skel)
    pose = clamp_to_limits(skel, pose)
    if config.warm_start.recenter:
        centroid, names = objective.target_centroid()
        if centroid is not None and not np.all(np.isfinite(centroid)):
            raise SolveInputError("non-finite target positions")
        if centroid is not None:
            model = site_positions(skel, pose, names).mean(axis=0)
            q = pose.q.copy()
            q[:3] += centroid - model
            pose = pose.replace(q=q)
    return pose


def run_stage(skel, objective, stage, pose, config):
    mask = stage.mask(skel)
    sites = stage.site_filter(skel)

    def fn(p, jac=True):
        return objective.block(p, mask, stage.offset_reg, sites, jacobian=jac)

    block = fn(pose)
    loss = block.loss
    trace = StageTrace(stage.name, loss, loss)
    if not np.isfinite(loss):
        raise SolveInputError(f"stage {stage.name!r}: non-finite starting loss")
    base = stage.damping
    lam = base
    small = 0
    stationary = False
    for it in range(stage.iterations):
        try:
            step = lm_step(skel, fn, pose, lam, config.max_step_norm, block)
        except StepFailure:
            lam = lam * config.lambda_up if lam > 0 else 1e-6
            trace.iterations.append([it, loss, 0.0, lam, False])
            continue
        if not step.step.any():
            stationary = True
            trace.stop_reason = "stationary"
            break
        cand_loss = fn(step.candidate, False).loss
        step_norm = float(np.linalg.norm(step.step))
        if cand_loss < loss:
            rel = (loss - cand_loss) / loss
            pose, loss = step.candidate, cand_loss
            block = fn(pose)
            trace.accepted += 1
            trace.iterations.append([it, loss, step_norm, lam, True])
            lam = max(lam * config.lambda_down, base)
            small = small + 1 if rel < config.convergence_tol else 0
            if small >= config.patience:
                trace.stop_reason = "converged"
                break
        else:
            trace.iterations.append([it, cand_loss, step_norm, lam, False])
            if step.predicted_reduction <= 1e-12 * loss + 1e-300:
                stationary = True
                trace.stop_reason = "stationary"
                break
            lam = lam * config.lambda_up if lam > 0 else 1e-6
            if lam > 1e16:
                trace.stop_reason = "damping_overflow"
                break
    trace.end_loss = loss
    trace.converged = trace.accepted > 0 or stationary
    return pose, trace


def run_staged(skel, targets, config=None, objective=None):
    """Run every stage in order, each starting from the previous stage's pose.

    ``targets`` is a :class:`MarkerFrame` (ignored when an explicit
    ``objective`` such as a :class:`ReprojectionObjective` is given).
    """
    t0 = time.perf_counter()
    if config is None:
        config = default_monocular_config(skel)
    if objective is None:
        objective = MarkerObjective(skel, targets, config.limit_stiffness)
    config.validate(skel)
    observed = getattr(objective, "observed_sites", None)
    if observed is not None and not observed():
        raise SolveInputError("no observation has positive confidence")
    pose = warm_start_pose(skel, objective, config)
    initial = pose
    traces, stage_poses, diagnostics = [], [], []
    for stage in config.stages:
        pose, trace = run_stage(skel, objective, stage, pose, config)
        traces.append(trace)
        stage_poses.append(pose)
        if not trace.converged:
            diagnostics.append(
                f"stage {stage.name!r}: all {len(trace.iterations)} steps rejected "
                f"(final damping {trace.iterations[-1][3]:.3g})")
            log.warning(diagnostics[-1])
    final_block = objective.block(pose, np.zeros(skel.n_params, bool),
                                  config.stages[-1].offset_reg, None, jacobian=False)
    return SolveReport(
        final_pose=pose, stages=traces, stage_poses=stage_poses,
        converged=all(t.converged for t in traces), final_loss=final_block.loss,
        initial_pose=initial, wall_time=time.perf_counter() - t0, diagnostics=diagnostics)
