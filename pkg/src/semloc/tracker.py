"""Per-frame pose refinement against semantic cost maps.

The pipeline per frame: odometry prediction, optional longitudinal GPS
correction in degenerate scenes, two-pass robust Levenberg-Marquardt
alignment of projected map points (pass 1 with a Huber kernel, pass 2
kernel-free on the surviving inliers), optional decoupled DoF scheduling
with a brute-force roll search, and a confidence score from the final
cost-map values.

The set of active observations is frozen at the predicted pose: a point
that leaves the image during optimization keeps contributing the maximal
residual with zero gradient, which keeps the objective well defined and
the accepted-step sequence monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costmap import bilinear_batch
from .errors import DegenerateNormalEquations, NoVisiblePoints, ValidationError
from .geometry import (
    DEFAULT_Z_MIN,
    EulerPose,
    Pose,
    jacobian_point_euler,
    jacobian_point_se3,
    jacobian_point_translation,
    jacobian_projection,
    rot_x,
    rot_y,
    rot_z,
)
from .hdmap import LandmarkClass
from .initializer import evaluate_pose_cost

DOF_FULL6 = "full6"
DOF_DECOUPLED = "decoupled"
CONSTRAINED = "constrained"
UNCONSTRAINED = "unconstrained"

_LM_LAMBDA_INIT = 1e-3
_LM_LAMBDA_MAX = 1e10
_LM_STEP_TOL = 1e-10
_DIAG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrackerConfig:
    huber_delta: float = 0.3
    outlier_cutoff: float = 0.7
    max_lm_iterations: int = 30
    min_observations: int = 12
    min_vertical_samples: int = 10
    parallel_angle_threshold: float = math.radians(2.0)
    curvature_threshold: float = 1.0 / 500.0
    roll_search_range: float = math.radians(2.0)
    roll_search_step: float = math.radians(0.5)
    confidence_success: float = 0.6

    def validate(self) -> None:
        for name in (
            "huber_delta",
            "outlier_cutoff",
            "max_lm_iterations",
            "min_observations",
            "min_vertical_samples",
            "parallel_angle_threshold",
            "curvature_threshold",
            "roll_search_range",
            "roll_search_step",
            "confidence_success",
        ):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.roll_search_step > self.roll_search_range:
            raise ValidationError("roll search step must not exceed the range")


@dataclass
class TrackResult:
    pose: Pose
    confidence: float
    inlier_count: int
    converged: bool
    dof_mode: str
    iterations: int
    objective_histories: tuple


def predict_pose(prev: Pose, odom: Pose) -> Pose:
    """Propagate the previous body pose by the body-frame increment."""
    return prev.compose(odom)


def longitudinal_correction(pose: Pose, gps_xy: np.ndarray, valid: bool) -> Pose:
    """Move the pose along its forward axis so its longitudinal position
    matches the GPS fix; lateral position and all angles are untouched."""
    if not valid:
        return pose
    forward = pose.rotation[:2, 0]
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        return pose
    f2 = forward / norm
    residual = np.asarray(gps_xy, dtype=float) - pose.translation[:2]
    shift = float(residual @ f2)
    t = pose.translation.copy()
    t[:2] += shift * f2
    return Pose(pose.rotation, t)


def _fold_angle(a: np.ndarray) -> np.ndarray:
    """Fold angle differences into [-pi/2, pi/2) modulo pi (undirected lines)."""
    return (a + np.pi / 2) % np.pi - np.pi / 2


def detect_longitudinal_constraint(points, pose: Pose, cfg: TrackerConfig) -> str:
    """Scene observability check: longitudinal translation is unconstrained
    when there are (almost) no vertical landmarks and the visible lanes are
    mutually parallel and straight."""
    vertical = sum(
        1 for pt in points if pt.cls in (LandmarkClass.POLE, LandmarkClass.SIGNBOARD)
    )
    if vertical >= cfg.min_vertical_samples:
        return CONSTRAINED

    by_lane = {}
    for pt in points:
        if pt.cls is LandmarkClass.LANE_MARKING:
            by_lane.setdefault(pt.source_id, []).append(pt)
    if not by_lane:
        return CONSTRAINED

    headings = []
    for samples in by_lane.values():
        samples.sort(key=lambda p: p.arclength)
        chord_heading = []
        chord_s = []
        for a, b in zip(samples, samples[1:]):
            d = b.position[:2] - a.position[:2]
            ds = float(np.linalg.norm(d))
            if ds < 1e-9:
                continue
            chord_heading.append(math.atan2(d[1], d[0]))
            chord_s.append(0.5 * (a.arclength + b.arclength))
        headings.extend(chord_heading)
        for i in range(len(chord_heading) - 1):
            ds = chord_s[i + 1] - chord_s[i]
            if ds <= 1e-9:
                continue
            dth = abs(float(_fold_angle(np.array(chord_heading[i + 1] - chord_heading[i]))))
            if dth / ds >= cfg.curvature_threshold:
                return CONSTRAINED

    if len(headings) >= 2:
        rel = _fold_angle(np.array(headings) - headings[0])
        if rel.max() - rel.min() > cfg.parallel_angle_threshold:
            return CONSTRAINED
    return UNCONSTRAINED


def select_dof_mode(constraint: str) -> str:
    return DOF_FULL6 if constraint == CONSTRAINED else DOF_DECOUPLED


class AlignmentProblem:
    """Residuals and Jacobians of the cost-map alignment objective over a
    fixed set of observations (point, camera pairs visible at the predicted
    pose)."""

    def __init__(self, pred: Pose, points, cameras, costmaps, cfg: TrackerConfig):
        if not points:
            raise NoVisiblePoints("no points supplied")
        self.cameras = list(cameras)
        self.cfg = cfg
        positions = np.array([pt.position for pt in points])
        classes = [pt.cls for pt in points]

        # Observation blocks: per camera, per class, point indices visible
        # at the prediction. Block order is canonical and frozen.
        self.blocks = []
        for cam in self.cameras:
            p_b = (positions - pred.translation) @ pred.rotation
            ext = cam.extrinsic_bc
            p_c = (p_b - ext.translation) @ ext.rotation
            z = p_c[:, 2]
            ok = z >= DEFAULT_Z_MIN
            z_safe = np.maximum(z, DEFAULT_Z_MIN)
            u = cam.fx * p_c[:, 0] / z_safe + cam.cx
            v = cam.fy * p_c[:, 1] / z_safe + cam.cy
            ok &= (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
            for cls in LandmarkClass:
                idx = np.array(
                    [i for i in range(len(points)) if ok[i] and classes[i] is cls],
                    dtype=int,
                )
                if len(idx):
                    self.blocks.append((cam, cls, idx))
        self.positions = positions
        self.n_obs = sum(len(idx) for _, _, idx in self.blocks)
        if self.n_obs == 0:
            raise NoVisiblePoints("no projected point lands in any image")

    def evaluate(self, pose: Pose, costmaps) -> dict:
        """Residuals r = I(u) - 1 over the frozen observation set.

        Observations whose projection has left the valid domain get value 0
        (maximal residual) and a zero gradient.
        """
        r = np.empty(self.n_obs)
        values = np.zeros(self.n_obs)
        grads = np.zeros((self.n_obs, 2))
        ok_all = np.zeros(self.n_obs, dtype=bool)
        p_c_all = np.zeros((self.n_obs, 3))
        offset = 0
        for cam, cls, idx in self.blocks:
            m = len(idx)
            p_b = (self.positions[idx] - pose.translation) @ pose.rotation
            ext = cam.extrinsic_bc
            p_c = (p_b - ext.translation) @ ext.rotation
            z = p_c[:, 2]
            ok = z >= DEFAULT_Z_MIN
            z_safe = np.maximum(z, DEFAULT_Z_MIN)
            u = cam.fx * p_c[:, 0] / z_safe + cam.cx
            v = cam.fy * p_c[:, 1] / z_safe + cam.cy
            ok &= (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
            uv = np.stack(
                [np.clip(u, 0, cam.width - 1), np.clip(v, 0, cam.height - 1)], axis=1
            )
            val, grad = bilinear_batch(costmaps[cam.name][cls].data, uv)
            sl = slice(offset, offset + m)
            values[sl] = np.where(ok, val, 0.0)
            grads[sl] = np.where(ok[:, None], grad, 0.0)
            ok_all[sl] = ok
            p_c_all[sl] = p_c
            offset += m
        r = values - 1.0
        return {"r": r, "values": values, "grads": grads, "ok": ok_all, "p_c": p_c_all}

    def jacobian_full6(self, ev: dict) -> np.ndarray:
        """d r / d (right SE(3) perturbation of the body pose), (M, 6)."""
        out = np.zeros((self.n_obs, 6))
        offset = 0
        for cam, _, idx in self.blocks:
            m = len(idx)
            sl = slice(offset, offset + m)
            ok = ev["ok"][sl]
            if ok.any():
                p_c = ev["p_c"][sl]
                p_c_safe = p_c.copy()
                p_c_safe[:, 2] = np.maximum(p_c_safe[:, 2], DEFAULT_Z_MIN * 1.01)
                j_proj = jacobian_projection(cam, p_c_safe)
                j_pt = jacobian_point_se3(p_c_safe, cam.extrinsic_bc.inverse())
                rows = np.einsum("mi,mij,mjk->mk", ev["grads"][sl], j_proj, j_pt)
                out[sl] = np.where(ok[:, None], rows, 0.0)
            offset += m
        return out

    def jacobian_axes(self, pose: Pose, ev: dict, axes) -> np.ndarray:
        """Columns for a subset of Euler-angle / fixed-frame-translation
        parameters; axes entries are ("euler", "x"|"y"|"z") or
        ("trans", world_direction 3-vector)."""
        euler = EulerPose.from_pose(pose)
        out = np.zeros((self.n_obs, len(axes)))
        offset = 0
        for cam, _, idx in self.blocks:
            m = len(idx)
            sl = slice(offset, offset + m)
            ok = ev["ok"][sl]
            if ok.any():
                p_c_safe = ev["p_c"][sl].copy()
                p_c_safe[:, 2] = np.maximum(p_c_safe[:, 2], DEFAULT_Z_MIN * 1.01)
                j_proj = jacobian_projection(cam, p_c_safe)
                for col, (kind, arg) in enumerate(axes):
                    if kind == "euler":
                        dpc = jacobian_point_euler(
                            euler, cam.extrinsic_bc, self.positions[idx], arg
                        )
                    else:
                        dpc = np.broadcast_to(
                            jacobian_point_translation(pose, cam.extrinsic_bc)
                            @ np.asarray(arg, dtype=float),
                            (m, 3),
                        )
                    du = np.einsum("mij,mj->mi", j_proj, dpc)
                    rows = np.einsum("mi,mi->m", ev["grads"][sl], du)
                    out[sl, col] = np.where(ok, rows, 0.0)
            offset += m
        return out


def _huber_objective(r: np.ndarray, delta) -> float:
    if delta is None:
        return float(0.5 * np.sum(r * r))
    a = np.abs(r)
    quad = a <= delta
    return float(
        np.sum(np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta)))
    )


def _huber_weights(r: np.ndarray, delta) -> np.ndarray:
    if delta is None:
        return np.ones_like(r)
    a = np.abs(r)
    w = np.ones_like(r)
    big = a > delta
    w[big] = delta / a[big]
    return w


class _Full6Param:
    def __init__(self, pose: Pose):
        self._pose = pose
        self.dim = 6

    def pose(self) -> Pose:
        return self._pose

    def step(self, delta: np.ndarray) -> "_Full6Param":
        return _Full6Param(self._pose.compose(Pose.exp(delta)))

    def jacobian(self, problem: AlignmentProblem, ev: dict) -> np.ndarray:
        return problem.jacobian_full6(ev)


class _AxesParam:
    """Pose chart for decoupled stages: selected Z-Y-X angles plus selected
    translation components along a frame held fixed at the prediction.

    Untouched components stay bit-identical to the prediction: roll and the
    forward-frame x offset are structurally absent from the state.
    """

    def __init__(self, euler_angles, frame, t_base, offsets, spec):
        # spec: list of ("euler", axis) / ("trans", frame column index)
        self.angles = dict(euler_angles)  # {"x":..,"y":..,"z":..}
        self.frame = frame
        self.t_base = t_base
        self.offsets = dict(offsets)  # {1: dy, 2: dz} frame-column offsets
        self.spec = spec
        self.dim = len(spec)

    @classmethod
    def at(cls, pred: Pose, spec):
        e = EulerPose.from_pose(pred)
        return cls(
            {"x": e.theta_x, "y": e.theta_y, "z": e.theta_z},
            pred.rotation.copy(),
            pred.translation.copy(),
            {1: 0.0, 2: 0.0},
            spec,
        )

    def pose(self) -> Pose:
        rot = (
            rot_z(self.angles["z"]) @ rot_y(self.angles["y"]) @ rot_x(self.angles["x"])
        )
        t = (
            self.t_base
            + self.offsets[1] * self.frame[:, 1]
            + self.offsets[2] * self.frame[:, 2]
        )
        return Pose(rot, t)

    def step(self, delta: np.ndarray) -> "_AxesParam":
        angles = dict(self.angles)
        offsets = dict(self.offsets)
        for d, (kind, arg) in zip(delta, self.spec):
            if kind == "euler":
                angles[arg] = angles[arg] + float(d)
            else:
                offsets[arg] = offsets[arg] + float(d)
        return _AxesParam(angles, self.frame, self.t_base, offsets, self.spec)

    def jacobian(self, problem: AlignmentProblem, ev: dict) -> np.ndarray:
        axes = []
        for kind, arg in self.spec:
            if kind == "euler":
                axes.append(("euler", arg))
            else:
                axes.append(("trans", self.frame[:, arg]))
        return problem.jacobian_axes(self.pose(), ev, axes)


def _lm_minimize(problem, costmaps, param, obs_mask, kernel_delta, cfg):
    """Damped least squares with a multiplicative lambda schedule. Returns
    (param, objective_history, iterations). Raises DegenerateNormalEquations
    when the system carries no information."""
    ev = problem.evaluate(param.pose(), costmaps)
    obj = _huber_objective(ev["r"][obs_mask], kernel_delta)
    history = [obj]
    lam = _LM_LAMBDA_INIT
    iters = 0
    for _ in range(cfg.max_lm_iterations):
        iters += 1
        jac = param.jacobian(problem, ev)[obs_mask]
        r = ev["r"][obs_mask]
        w = _huber_weights(r, kernel_delta)
        h = jac.T @ (jac * w[:, None])
        g = jac.T @ (w * r)
        if not np.any(np.abs(h) > 0.0):
            # Zero gradient everywhere. If any observation sits within the
            # inlier band this is a flat optimum (projections resting on
            # their cost plateaus; dead observations, e.g. a camera with a
            # blank mask, contribute max residual but no gradient and must
            # not veto the live ones). No inliers at all means the frame
            # carries no usable information.
            if np.any(np.abs(r) <= cfg.outlier_cutoff):
                break
            raise DegenerateNormalEquations("zero normal equations")
        damped = h + lam * np.diag(np.diag(h)) + _DIAG_FLOOR * np.eye(param.dim)
        try:
            delta = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError as exc:
            raise DegenerateNormalEquations(str(exc)) from exc
        cand = param.step(delta)
        ev_cand = problem.evaluate(cand.pose(), costmaps)
        obj_cand = _huber_objective(ev_cand["r"][obs_mask], kernel_delta)
        if obj_cand < obj:
            param, ev, obj = cand, ev_cand, obj_cand
            history.append(obj)
            lam = max(lam / 10.0, 1e-12)
            if np.max(np.abs(delta)) < _LM_STEP_TOL:
                break
        else:
            lam *= 10.0
            if lam > _LM_LAMBDA_MAX or np.max(np.abs(delta)) < _LM_STEP_TOL:
                break
    return param, history, iters


def _two_pass(problem, costmaps, param, cfg):
    """Huber pass over all observations, then a kernel-free pass restricted
    to inliers of the first pass. Returns (param, histories, iterations,
    inlier_mask)."""
    all_obs = np.ones(problem.n_obs, dtype=bool)
    param, hist1, it1 = _lm_minimize(
        problem, costmaps, param, all_obs, cfg.huber_delta, cfg
    )
    ev = problem.evaluate(param.pose(), costmaps)
    inliers = np.abs(ev["r"]) <= cfg.outlier_cutoff
    histories = [hist1]
    iters = it1
    if inliers.any():
        param, hist2, it2 = _lm_minimize(problem, costmaps, param, inliers, None, cfg)
        histories.append(hist2)
        iters += it2
    return param, histories, iters, inliers


def compute_confidence(values: np.ndarray) -> float:
    """Mean cost-map value over the final inlier projections; empty -> 0."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0
    return float(values.mean())


def _result_at_prediction(problem, pred, costmaps, cfg, dof_mode, iterations, histories):
    """Non-converged result reporting the prediction unchanged, with the
    confidence and inlier count the prediction earns on its own."""
    ev = problem.evaluate(pred, costmaps)
    inliers = np.abs(ev["r"]) <= cfg.outlier_cutoff
    return TrackResult(
        pose=pred,
        confidence=compute_confidence(ev["values"][inliers]),
        inlier_count=int(inliers.sum()),
        converged=False,
        dof_mode=dof_mode,
        iterations=iterations,
        objective_histories=tuple(tuple(h) for h in histories),
    )


def align_photometric(
    pred: Pose, points, cameras, costmaps, cfg: TrackerConfig, dof_mode: str = DOF_FULL6
) -> TrackResult:
    """Two-pass robust alignment of the predicted pose to the cost maps."""
    problem = AlignmentProblem(pred, points, cameras, costmaps, cfg)
    if problem.n_obs < cfg.min_observations:
        # Fewer projected points than the solve can be trusted with: a
        # six-degree problem resting on a handful of observations converges
        # somewhere on a wide solution manifold instead of the true pose.
        return _result_at_prediction(problem, pred, costmaps, cfg, dof_mode, 0, [])
    histories = []
    iterations = 0
    converged = True
    try:
        if dof_mode == DOF_FULL6:
            param, hists, iters, inliers = _two_pass(
                problem, costmaps, _Full6Param(pred), cfg
            )
            histories.extend(hists)
            iterations += iters
            final_pose = param.pose()
        else:
            stage1 = _AxesParam.at(
                pred, [("euler", "y"), ("euler", "z"), ("trans", 1)]
            )
            param, hists, iters, _ = _two_pass(problem, costmaps, stage1, cfg)
            histories.extend(hists)
            iterations += iters
            stage2 = _AxesParam(
                param.angles, param.frame, param.t_base, param.offsets,
                [("euler", "y"), ("trans", 2)],
            )
            param, hists, iters, inliers = _two_pass(problem, costmaps, stage2, cfg)
            histories.extend(hists)
            iterations += iters
            final_pose = param.pose()
    except DegenerateNormalEquations:
        return _result_at_prediction(
            problem, pred, costmaps, cfg, dof_mode, iterations, histories
        )

    ev = problem.evaluate(final_pose, costmaps)
    confidence = compute_confidence(ev["values"][inliers])
    return TrackResult(
        pose=final_pose,
        confidence=confidence,
        inlier_count=int(inliers.sum()),
        converged=converged,
        dof_mode=dof_mode,
        iterations=iterations,
        objective_histories=tuple(tuple(h) for h in histories),
    )


def roll_offsets(cfg: TrackerConfig) -> np.ndarray:
    n = int(math.floor(cfg.roll_search_range / cfg.roll_search_step + 1e-9))
    return cfg.roll_search_step * np.arange(-n, n + 1, dtype=float)


def rotation_brute_refine(pose: Pose, cameras, costmaps, points, cfg: TrackerConfig) -> Pose:
    """Brute-force roll fine-tuning: evaluate the mean cost at small roll
    offsets about the body x axis, keep the best; ties prefer zero offset."""
    best = None
    for offset in roll_offsets(cfg):
        cand = Pose(pose.rotation @ rot_x(float(offset)), pose.translation)
        try:
            ev = evaluate_pose_cost(cand, cameras, costmaps, points)
        except NoVisiblePoints:
            continue
        key = (ev.mean_cost, abs(offset), offset)
        if best is None or key < best[0]:
            best = (key, cand)
    return pose if best is None else best[1]
