"""Closed-loop localization pipeline: initialize, track, fuse, recover.

Per frame the loop builds class cost maps from the frame's masks, predicts
the pose by composing the previous estimate with the odometry increment,
checks the scene (map crop present? masks carrying any content? enough
vertical structure for full 6-DoF?), aligns, and fuses the aligned pose
into the sliding window. Failures feed the Initializing/Tracking/Lost state
machine; frames that produce nothing trustworthy emit the odometry-propagated
backup so the output stream never has gaps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .costmap import build_class_costmaps
from .errors import (
    AllCandidatesInvalid,
    DegenerateNormalEquations,
    EmptyMapNeighborhood,
    InitializationFailed,
    InsufficientSeparation,
    NoVisiblePoints,
    SequenceNotFound,
    SolverDiverged,
    ValidationError,
)
from .geometry import DEFAULT_Z_MIN, Pose
from .hdmap import crop_local_map
from .initializer import cap_points, grid_search_refine, coarse_pose_from_gps
from .posegraph import (
    ACTION_OPTIMIZED,
    FrameOutcome,
    LocalizationState,
    TrackingStatus,
    WindowFrame,
    add_frame,
    optimize_window,
    step,
)
from .rpe import Trajectory
from .simworld import load_sequence
from .tracker import (
    DOF_DECOUPLED,
    align_photometric,
    detect_longitudinal_constraint,
    longitudinal_correction,
    predict_pose,
    rotation_brute_refine,
    select_dof_mode,
)

_OCCLUSION_FRACTION = 0.01
_MAX_STORED_FIXES = 50


@dataclass(frozen=True)
class FrameRecord:
    """Per-frame pipeline output: the emitted pose plus bookkeeping."""

    frame_id: int
    timestamp: float
    pose: Pose
    status: str
    action: str
    confidence: float
    dof_mode: str
    track_ms: float

    @property
    def tracked(self) -> bool:
        return self.action == ACTION_OPTIMIZED


@dataclass
class PipelineResult:
    records: list

    def estimate(self) -> Trajectory:
        return Trajectory(
            np.array([r.timestamp for r in self.records]),
            tuple(r.pose for r in self.records),
        )

    def tracked_estimate(self) -> Trajectory:
        rows = [r for r in self.records if r.tracked]
        if not rows:
            return Trajectory(np.empty(0), ())
        return Trajectory(
            np.array([r.timestamp for r in rows]), tuple(r.pose for r in rows)
        )


def _count_visible(pose: Pose, points, cameras) -> int:
    if not points:
        return 0
    positions = np.array([pt.position for pt in points])
    p_b = (positions - pose.translation) @ pose.rotation
    total = 0
    for cam in cameras:
        ext = cam.extrinsic_bc
        p_c = (p_b - ext.translation) @ ext.rotation
        z = p_c[:, 2]
        ok = z >= DEFAULT_Z_MIN
        z_safe = np.maximum(z, DEFAULT_Z_MIN)
        u = cam.fx * p_c[:, 0] / z_safe + cam.cx
        v = cam.fy * p_c[:, 1] / z_safe + cam.cy
        ok &= (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
        total += int(ok.sum())
    return total


def _mask_occupancy(masks: dict) -> int:
    total = 0
    for per_cls in masks.values():
        for mask in per_cls.values():
            total += int(np.count_nonzero(mask.data))
    return total


def _pick_gps_pair(fixes, current_xy, min_separation):
    """Most recent stored fix far enough behind the current one."""
    for old_xy in reversed(fixes):
        if np.linalg.norm(current_xy - old_xy) >= min_separation:
            return old_xy
    return None


def run_sequence(hdmap, bundles, cameras, cfg) -> PipelineResult:
    """Run the full localization loop over in-memory frames.

    Raises InitializationFailed when the pipeline spends more than
    cfg.init_retry_budget consecutive frames without tracking, or finishes
    the sequence without ever having tracked.
    """
    records = []
    state = LocalizationState()
    window = []
    est = None  # last trustworthy estimate (or propagated backup)
    accum_odom = Pose.identity()
    fixes = []
    ever_tracked = False
    untracked_streak = 0

    for k, bundle in enumerate(bundles):
        t0 = time.perf_counter()
        if bundle.gps_valid:
            fixes.append(np.asarray(bundle.gps_xy, dtype=float))
            del fixes[:-_MAX_STORED_FIXES]

        costmaps = None

        def get_costmaps():
            nonlocal costmaps
            if costmaps is None:
                costmaps = {
                    name: build_class_costmaps(per_cls)
                    for name, per_cls in bundle.masks.items()
                }
            return costmaps

        pred = None
        if est is not None and k > 0:
            pred = predict_pose(est, bundles[k - 1].odometry)

        confidence = 0.0
        dof_mode = ""
        if state.status is not TrackingStatus.TRACKING:
            success, pose, confidence = _attempt_initialization(
                hdmap, bundle, cameras, cfg, fixes, get_costmaps
            )
            if success:
                dof_mode = "init"
                est = pose
                window = [
                    WindowFrame(
                        frame_id=k,
                        prior_pose=pose,
                        prior_valid=True,
                        odom_to_next=Pose.identity(),
                        optimized_pose=pose,
                        confidence=confidence,
                    )
                ]
                accum_odom = bundle.odometry
                outcome = FrameOutcome(success=True)
            else:
                if pred is not None:
                    est = pred
                elif pose is not None:
                    est = pose  # coarse GPS pose keeps the stream going
                outcome = FrameOutcome(success=False)
        else:
            outcome, new_est, confidence, dof_mode, added = _track_frame(
                k, hdmap, bundle, cameras, cfg, pred, window, accum_odom, get_costmaps
            )
            est = new_est
            if added is not None:
                window = added
                accum_odom = bundle.odometry
            else:
                accum_odom = accum_odom.compose(bundle.odometry)

        state, action = step(state, outcome, cfg.graph)
        if state.status is TrackingStatus.LOST:
            window = []
        emitted = est if est is not None else Pose.identity()
        track_ms = (time.perf_counter() - t0) * 1e3
        records.append(
            FrameRecord(
                frame_id=k,
                timestamp=bundle.timestamp,
                pose=emitted,
                status=state.status.value,
                action=action,
                confidence=confidence,
                dof_mode=dof_mode,
                track_ms=track_ms,
            )
        )
        if action == ACTION_OPTIMIZED:
            ever_tracked = True
            untracked_streak = 0
        else:
            untracked_streak += 1
            if untracked_streak > cfg.init_retry_budget:
                raise InitializationFailed(
                    f"no tracked frame in {untracked_streak} consecutive frames"
                )
    if not ever_tracked:
        raise InitializationFailed("sequence ended before initialization succeeded")
    return PipelineResult(records=records)


def _attempt_initialization(hdmap, bundle, cameras, cfg, fixes, get_costmaps):
    """(success, pose or None, confidence). pose is the refined estimate on
    success, else a coarse stand-in if one could be built."""
    if not bundle.gps_valid or len(fixes) < 2:
        return False, None, 0.0
    current = np.asarray(bundle.gps_xy, dtype=float)
    old = _pick_gps_pair(fixes[:-1], current, min_separation=2.0)
    if old is None:
        return False, None, 0.0
    try:
        coarse = coarse_pose_from_gps(old, current, hdmap)
    except (InsufficientSeparation, EmptyMapNeighborhood):
        return False, None, 0.0
    points = cap_points(crop_local_map(hdmap, coarse))
    if not points:
        return False, coarse, 0.0
    try:
        best = grid_search_refine(coarse, cfg.grid, cameras, get_costmaps(), points)
    except (AllCandidatesInvalid, NoVisiblePoints):
        return False, coarse, 0.0
    if best.mean_cost >= cfg.init_cost_gate:
        return False, coarse, 0.0
    return True, best.pose, 1.0 - best.mean_cost


def _track_frame(k, hdmap, bundle, cameras, cfg, pred, window, accum_odom, get_costmaps):
    """Returns (outcome, new_est, confidence, dof_mode, new_window_or_None)."""
    points = cap_points(crop_local_map(hdmap, pred))
    if not points:
        return FrameOutcome(success=False, in_domain=False), pred, 0.0, "", None

    expected = _count_visible(pred, points, cameras)
    occupancy = _mask_occupancy(bundle.masks)
    if expected > 0 and occupancy < _OCCLUSION_FRACTION * expected:
        return FrameOutcome(success=False, occluded=True), pred, 0.0, "", None

    constraint = detect_longitudinal_constraint(points, pred, cfg.tracker)
    dof_mode = select_dof_mode(constraint)
    if (
        dof_mode == DOF_DECOUPLED
        and cfg.longitudinal_correction
        and bundle.gps_valid
    ):
        pred = longitudinal_correction(pred, bundle.gps_xy, True)

    try:
        result = align_photometric(
            pred, points, cameras, get_costmaps(), cfg.tracker, dof_mode=dof_mode
        )
        pose = result.pose
        if dof_mode == DOF_DECOUPLED:
            pose = rotation_brute_refine(
                pose, cameras, get_costmaps(), points, cfg.tracker
            )
    except (NoVisiblePoints, DegenerateNormalEquations):
        return FrameOutcome(success=False), pred, 0.0, dof_mode, None

    if not result.converged or result.confidence < cfg.tracker.confidence_success:
        return FrameOutcome(success=False), pred, result.confidence, dof_mode, None

    stamped = list(window)
    if stamped:
        stamped[-1] = replace(stamped[-1], odom_to_next=accum_odom)
    new_frame = WindowFrame(
        frame_id=k,
        prior_pose=pose,
        prior_valid=True,
        odom_to_next=Pose.identity(),
        confidence=result.confidence,
    )
    stamped = add_frame(stamped, new_frame, cfg.graph)
    try:
        optimized = optimize_window(stamped, cfg.graph)
    except SolverDiverged:
        return FrameOutcome(success=False), pred, result.confidence, dof_mode, None
    est = optimized[-1].optimized_pose
    return FrameOutcome(success=True), est, result.confidence, dof_mode, optimized


def run_pipeline(cfg):
    """Load the sequence, run the loop, write artifacts to cfg.output.

    Returns (PipelineResult, dict of artifact paths).
    """
    from . import report

    seq_dir = Path(cfg.sequence)
    if not seq_dir.is_dir():
        raise SequenceNotFound(f"sequence directory not found: {seq_dir}")
    hdmap, bundles, cameras = load_sequence(seq_dir)
    result = run_sequence(hdmap, bundles, cameras, cfg)
    reference = Trajectory(
        np.array([b.timestamp for b in bundles]),
        tuple(b.gt_pose for b in bundles),
    )
    paths = report.write_run_artifacts(Path(cfg.output), result, reference, cfg)
    return result, paths


def init_success_rate(hdmap, bundles, cameras, cfg, budget: int, starts=None) -> float:
    """Fraction of start frames from which the pipeline reaches tracking
    within `budget` frames."""
    if budget < 1:
        raise ValidationError("budget must be >= 1")
    n = len(bundles)
    if starts is None:
        count = min(100, max(1, n - budget))
        starts = np.unique(np.linspace(0, n - budget, count).astype(int))
    successes = 0
    attempts = 0
    for s in starts:
        attempts += 1
        window = bundles[s : s + budget]
        try:
            result = run_sequence(hdmap, window, cameras, cfg)
        except InitializationFailed:
            continue
        if any(r.tracked for r in result.records):
            successes += 1
    return successes / attempts if attempts else 0.0
