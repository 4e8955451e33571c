"""Sliding-window fusion of per-frame alignment results with odometry.

Each window frame carries the pose the aligner produced (the prior) and the
odometry increment to the next frame. The window optimizer balances prior
agreement against odometry consistency with a squared-norm objective

    sum_i w_i ||log(T_i (P_i)^-1)||^2  +  lam * sum_i ||log(T_{i+1}^-1 T_i D_i)||^2

solved by damped Gauss-Newton on the product of SE(3) manifolds with right
perturbations. Prior weights w_i scale with the aligner confidence, so a
poorly supported frame pulls less; frames without a usable prior contribute
only odometry edges.

The module also owns the Initializing / Tracking / Lost state machine and
the marginalization policy that keeps the window at capacity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import NonMonotonicFrameId, SolverDiverged, ValidationError
from .geometry import Pose, hat

_LM_LAMBDA_INIT = 1e-6
_LM_LAMBDA_MAX = 1e12
_STEP_TOL = 1e-12
_DIAG_FLOOR = 1e-12

ACTION_OPTIMIZED = "optimized"
ACTION_BACKUP = "odometry_backup"


@dataclass
class WindowFrame:
    """One frame of the optimization window.

    odom_to_next is the body-frame increment from this frame to the next
    one in the window (identity for the newest frame until its successor
    arrives). confidence scales the prior weight; it is ignored when
    prior_valid is False.
    """

    frame_id: int
    prior_pose: Pose
    prior_valid: bool
    odom_to_next: Pose
    optimized_pose: Pose | None = None
    confidence: float = 1.0


@dataclass(frozen=True)
class GraphConfig:
    window_capacity: int = 10
    odometry_weight: float = 1.0
    stationary_threshold: float = 0.01
    max_failures: int = 5
    max_occluded: int = 10

    def validate(self) -> None:
        if self.window_capacity < 2:
            raise ValidationError("window_capacity must be >= 2")
        if self.odometry_weight < 0:
            raise ValidationError("odometry_weight must be >= 0")
        if self.stationary_threshold <= 0:
            raise ValidationError("stationary_threshold must be positive")
        if self.max_failures < 1 or self.max_occluded < 1:
            raise ValidationError("lost thresholds must be >= 1")


class TrackingStatus(enum.Enum):
    INITIALIZING = "initializing"
    TRACKING = "tracking"
    LOST = "lost"


@dataclass(frozen=True)
class LocalizationState:
    status: TrackingStatus = TrackingStatus.INITIALIZING
    consecutive_failures: int = 0
    consecutive_occluded: int = 0


@dataclass(frozen=True)
class FrameOutcome:
    """Per-frame summary fed to the state machine.

    success: the frame produced a trustworthy pose (alignment converged and
    the window optimization accepted it; during recovery, the grid search
    succeeded). occluded: the masks carry almost no semantic content, the
    frame was not aligned at all. in_domain: the local map crop around the
    predicted pose was non-empty.
    """

    success: bool
    occluded: bool = False
    in_domain: bool = True


def add_frame(window: list, frame: WindowFrame, cfg: GraphConfig) -> list:
    """Append a frame, then shrink back to capacity.

    The caller must already have stamped the previous newest frame's
    odom_to_next with the increment to the incoming frame. When that
    increment is shorter than the stationary threshold the second-newest
    frame is dropped (a stopped vehicle would otherwise flush the window
    with duplicates); otherwise the oldest goes. Removing an interior frame
    re-chains its predecessor's odometry so consecutive edges stay valid.
    """
    if window and frame.frame_id <= window[-1].frame_id:
        raise NonMonotonicFrameId(
            f"frame id {frame.frame_id} after {window[-1].frame_id}"
        )
    out = list(window)
    out.append(frame)
    if len(out) <= cfg.window_capacity:
        return out
    step_len = float(np.linalg.norm(out[-2].odom_to_next.translation))
    if step_len < cfg.stationary_threshold and len(out) >= 3:
        merged = out[-3].odom_to_next.compose(out[-2].odom_to_next)
        out[-3] = replace(out[-3], odom_to_next=merged)
        del out[-2]
    else:
        del out[0]
    return out


def _ad(xi: np.ndarray) -> np.ndarray:
    """Algebra adjoint of a translation-first se(3) tangent."""
    rho, phi = xi[:3], xi[3:]
    out = np.zeros((6, 6))
    out[:3, :3] = hat(phi)
    out[:3, 3:] = hat(rho)
    out[3:, 3:] = hat(phi)
    return out


def _jr_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SE(3), second-order series."""
    a = _ad(xi)
    return np.eye(6) + 0.5 * a + (1.0 / 12.0) * (a @ a)


def _initial_poses(window: list) -> list:
    poses = []
    for i, f in enumerate(window):
        if f.optimized_pose is not None:
            poses.append(f.optimized_pose)
        elif f.prior_valid:
            poses.append(f.prior_pose)
        elif poses:
            poses.append(poses[-1].compose(window[i - 1].odom_to_next))
        else:
            poses.append(f.prior_pose)
    return poses


def _graph_terms(window: list, cfg: GraphConfig):
    """(index, weight, kind) for every active residual term."""
    terms = []
    for i, f in enumerate(window):
        if f.prior_valid and f.confidence > 0.0:
            terms.append(("prior", i, float(f.confidence)))
    if cfg.odometry_weight > 0.0:
        for i in range(len(window) - 1):
            terms.append(("odom", i, float(cfg.odometry_weight)))
    return terms


def _graph_objective(poses: list, window: list, terms) -> float:
    total = 0.0
    for kind, i, w in terms:
        if kind == "prior":
            r = poses[i].compose(window[i].prior_pose.inverse()).log()
        else:
            r = (
                poses[i + 1]
                .inverse()
                .compose(poses[i])
                .compose(window[i].odom_to_next)
                .log()
            )
        total += w * float(r @ r)
    return total


def optimize_window(
    window: list, cfg: GraphConfig, max_iterations: int = 50, history: list = None
) -> list:
    """Minimize the fused objective; returns the window with optimized
    poses filled in. Raises SolverDiverged (window untouched) when the
    numerics break down.

    When ``history`` is a list it receives the objective value at the start
    and after every accepted step, so callers can audit the descent."""
    if not window:
        raise ValidationError("optimize_window needs at least one frame")
    poses = _initial_poses(window)
    terms = _graph_terms(window, cfg)
    if cfg.odometry_weight == 0.0:
        # Decoupled closed form: every valid prior is its own minimizer.
        out = []
        for f, init in zip(window, poses):
            out.append(replace(f, optimized_pose=f.prior_pose if f.prior_valid else init))
        return out

    n = len(window)
    obj = _graph_objective(poses, window, terms)
    if not np.isfinite(obj):
        raise SolverDiverged("non-finite initial objective")
    if history is not None:
        history.append(obj)
    lam_lm = _LM_LAMBDA_INIT
    for _ in range(max_iterations):
        h = np.zeros((6 * n, 6 * n))
        g = np.zeros(6 * n)
        for kind, i, w in terms:
            if kind == "prior":
                r = poses[i].compose(window[i].prior_pose.inverse()).log()
                jac = _jr_inv(r) @ window[i].prior_pose.adjoint()
                si = slice(6 * i, 6 * i + 6)
                h[si, si] += w * jac.T @ jac
                g[si] += w * jac.T @ r
            else:
                j = i + 1
                r = (
                    poses[j]
                    .inverse()
                    .compose(poses[i])
                    .compose(window[i].odom_to_next)
                    .log()
                )
                jr = _jr_inv(r)
                ji = jr @ window[i].odom_to_next.inverse().adjoint()
                jj = -_jr_inv(-r)
                si = slice(6 * i, 6 * i + 6)
                sj = slice(6 * j, 6 * j + 6)
                h[si, si] += w * ji.T @ ji
                h[si, sj] += w * ji.T @ jj
                h[sj, si] += w * jj.T @ ji
                h[sj, sj] += w * jj.T @ jj
                g[si] += w * ji.T @ r
                g[sj] += w * jj.T @ r
        if not np.all(np.isfinite(h)) or not np.all(np.isfinite(g)):
            raise SolverDiverged("non-finite normal equations")
        stepped = False
        while lam_lm <= _LM_LAMBDA_MAX:
            damped = h + lam_lm * np.diag(np.diag(h)) + _DIAG_FLOOR * np.eye(6 * n)
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError as exc:
                raise SolverDiverged(str(exc)) from exc
            if not np.all(np.isfinite(delta)):
                raise SolverDiverged("non-finite step")
            cand = [
                p.compose(Pose.exp(delta[6 * k : 6 * k + 6])) for k, p in enumerate(poses)
            ]
            cand_obj = _graph_objective(cand, window, terms)
            if not np.isfinite(cand_obj):
                raise SolverDiverged("non-finite objective")
            if cand_obj <= obj:
                improvement = obj - cand_obj
                poses, obj = cand, cand_obj
                if history is not None:
                    history.append(obj)
                lam_lm = max(lam_lm / 10.0, 1e-12)
                stepped = True
                if np.max(np.abs(delta)) < _STEP_TOL or improvement < 1e-15 * (1.0 + obj):
                    stepped = False  # converged, leave the outer loop too
                break
            lam_lm *= 10.0
        if not stepped:
            break
    return [replace(f, optimized_pose=p) for f, p in zip(window, poses)]


def step(
    state: LocalizationState, outcome: FrameOutcome, cfg: GraphConfig
) -> tuple[LocalizationState, str]:
    """Advance the localization state machine by one frame.

    Returns the new state and which pose the caller should emit for this
    frame: the optimized estimate, or the odometry-propagated backup when
    the frame produced nothing trustworthy.
    """
    status = state.status
    fails = state.consecutive_failures
    occl = state.consecutive_occluded
    if status is TrackingStatus.LOST:
        status, fails, occl = TrackingStatus.INITIALIZING, 0, 0
    if status is TrackingStatus.INITIALIZING:
        if outcome.success and outcome.in_domain:
            return LocalizationState(TrackingStatus.TRACKING, 0, 0), ACTION_OPTIMIZED
        return LocalizationState(TrackingStatus.INITIALIZING, 0, 0), ACTION_BACKUP
    if not outcome.in_domain:
        return LocalizationState(TrackingStatus.LOST, fails, occl), ACTION_BACKUP
    if outcome.occluded:
        # occluded frames skip alignment entirely, so only the occlusion
        # counter moves; the failure counter tracks attempted optimizations
        occl += 1
        if occl >= cfg.max_occluded:
            return LocalizationState(TrackingStatus.LOST, fails, occl), ACTION_BACKUP
        return LocalizationState(TrackingStatus.TRACKING, fails, occl), ACTION_BACKUP
    occl = 0
    fails = 0 if outcome.success else fails + 1
    if fails >= cfg.max_failures:
        return LocalizationState(TrackingStatus.LOST, fails, occl), ACTION_BACKUP
    action = ACTION_OPTIMIZED if outcome.success else ACTION_BACKUP
    return LocalizationState(TrackingStatus.TRACKING, fails, occl), action
