"""Pose initialization: coarse pose from two GPS fixes, refined by an
exhaustive grid search over lateral/longitudinal/yaw offsets that minimizes
the mean cost-map residual of projected map points.

Grid candidates are expressed in the coarse pose's vehicle frame
(longitudinal = body x, lateral = body y, yaw about body z). Candidate
evaluation is one shared batched routine, so a serial per-candidate
enumeration reproduces the search result bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costmap import bilinear_batch
from .errors import (
    AllCandidatesInvalid,
    EmptyMapNeighborhood,
    InsufficientSeparation,
    NoVisiblePoints,
    ValidationError,
)
from .geometry import DEFAULT_Z_MIN, Pose, rot_z
from .hdmap import HdMap, LandmarkClass, sample_polyline

DEFAULT_MIN_SEPARATION = 2.0
DEFAULT_MIN_VISIBLE = 0.3
DEFAULT_Z_LOOKUP_RADIUS = 50.0
DEFAULT_MAX_POINTS = 400
_CHUNK = 2048

_AXIS_NAMES = ("lateral", "longitudinal", "yaw")


@dataclass(frozen=True)
class GridAxis:
    axis: str  # lateral | longitudinal | yaw
    half_range: float  # meters or radians
    step: float

    def validate(self) -> None:
        if self.axis not in _AXIS_NAMES:
            raise ValidationError(f"unknown grid axis {self.axis!r}")
        if self.step <= 0:
            raise ValidationError("grid step must be positive")
        if self.step > self.half_range:
            raise ValidationError("grid step must not exceed the half range")

    def values(self) -> np.ndarray:
        n = int(math.floor(self.half_range / self.step + 1e-9))
        return self.step * np.arange(-n, n + 1, dtype=float)


@dataclass(frozen=True)
class GridSpec:
    axes: tuple

    def validate(self) -> None:
        if not self.axes:
            raise ValidationError("grid must have at least one axis")
        seen = set()
        for ax in self.axes:
            ax.validate()
            if ax.axis in seen:
                raise ValidationError(f"duplicate grid axis {ax.axis!r}")
            seen.add(ax.axis)


def default_grid() -> GridSpec:
    return GridSpec(
        (
            GridAxis("lateral", 10.0, 0.2),
            GridAxis("longitudinal", 5.0, 0.5),
            GridAxis("yaw", math.radians(6.0), math.radians(1.0)),
        )
    )


@dataclass(frozen=True)
class CostEvaluation:
    pose: Pose
    mean_cost: float
    visible_fraction: float
    n_points: int


def coarse_pose_from_gps(
    fix_a: np.ndarray,
    fix_b: np.ndarray,
    hdmap: HdMap,
    min_separation: float = DEFAULT_MIN_SEPARATION,
    z_lookup_radius: float = DEFAULT_Z_LOOKUP_RADIUS,
) -> Pose:
    """Coarse pose: xy at the newer fix, yaw from the fix pair, height from
    the nearest lane-marking sample, roll and pitch zero."""
    fix_a = np.asarray(fix_a, dtype=float)
    fix_b = np.asarray(fix_b, dtype=float)
    delta = fix_b - fix_a
    if np.linalg.norm(delta) < min_separation:
        raise InsufficientSeparation(
            f"fixes {np.linalg.norm(delta):.3f} m apart, need {min_separation} m"
        )
    yaw = math.atan2(delta[1], delta[0])

    center = np.array([fix_b[0], fix_b[1], 0.0])
    best_z = None
    best_d2 = np.inf
    for lm in hdmap.query_radius(center, z_lookup_radius):
        if lm.cls is not LandmarkClass.LANE_MARKING:
            continue
        for pt in sample_polyline(lm, 0.5):
            d2 = (pt.position[0] - fix_b[0]) ** 2 + (pt.position[1] - fix_b[1]) ** 2
            if d2 < best_d2:
                best_d2 = d2
                best_z = pt.position[2]
    if best_z is None:
        raise EmptyMapNeighborhood(
            f"no lane marking within {z_lookup_radius} m of {fix_b}"
        )
    return Pose(rot_z(yaw), np.array([fix_b[0], fix_b[1], best_z]))


def _group_by_class(points):
    positions = np.array([pt.position for pt in points])
    groups = {}
    for cls in LandmarkClass:
        idx = np.array([i for i, pt in enumerate(points) if pt.cls is cls], dtype=int)
        if len(idx):
            groups[cls] = idx
    return positions, groups


def _evaluate_batch(rotations, translations, cameras, costmaps, positions, groups):
    """Mean residual and visibility for a batch of candidate body poses.

    rotations: (K,3,3); translations: (K,3); positions: (N,3).
    Returns (mean_cost (K,), visible_fraction (K,)). Invisible points
    contribute nothing; candidates with no visible point get mean_cost inf.
    """
    k, n = rotations.shape[0], positions.shape[0]
    res_sum = np.zeros(k)
    res_count = np.zeros(k)
    any_visible = np.zeros((k, n), dtype=bool)
    p_b = np.matmul(positions[None, :, :] - translations[:, None, :], rotations)
    for cam in cameras:
        ext = cam.extrinsic_bc
        p_c = np.matmul(p_b - ext.translation, ext.rotation)
        z = p_c[..., 2]
        in_front = z >= DEFAULT_Z_MIN
        z_safe = np.maximum(z, DEFAULT_Z_MIN)
        u = cam.fx * p_c[..., 0] / z_safe + cam.cx
        v = cam.fy * p_c[..., 1] / z_safe + cam.cy
        inside = (
            in_front
            & (u >= 0.0)
            & (u <= cam.width - 1.0)
            & (v >= 0.0)
            & (v <= cam.height - 1.0)
        )
        uv = np.stack([np.clip(u, 0.0, cam.width - 1.0), np.clip(v, 0.0, cam.height - 1.0)], axis=-1)
        cam_maps = costmaps[cam.name]
        for cls, idx in groups.items():
            values, _ = bilinear_batch(cam_maps[cls].data, uv[:, idx, :])
            vis = inside[:, idx]
            res_sum += ((1.0 - values) * vis).sum(axis=1)
            res_count += vis.sum(axis=1)
        any_visible |= inside
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(res_count > 0, res_sum / np.maximum(res_count, 1), np.inf)
    return mean, any_visible.mean(axis=1)


def evaluate_pose_cost(pose: Pose, cameras, costmaps, points) -> CostEvaluation:
    """Mean (1 - cost-map value) over visible projected points; a point seen
    by several cameras contributes one observation per camera."""
    if not points:
        raise NoVisiblePoints("no points supplied")
    positions, groups = _group_by_class(points)
    mean, visfrac = _evaluate_batch(
        pose.rotation[None], pose.translation[None], cameras, costmaps, positions, groups
    )
    if not np.isfinite(mean[0]):
        raise NoVisiblePoints("no projected point lands in any image")
    return CostEvaluation(pose, float(mean[0]), float(visfrac[0]), len(points))


def grid_candidates(coarse: Pose, grid: GridSpec):
    """Candidate poses over the Cartesian grid, in canonical enumeration
    order. Returns (rotations (K,3,3), translations (K,3), offsets (K,3) as
    (longitudinal, lateral, yaw), displacement^2 (K,))."""
    grid.validate()
    value_lists = [ax.values() for ax in grid.axes]
    mesh = np.meshgrid(*value_lists, indexing="ij")
    flat = [m.reshape(-1) for m in mesh]
    k = flat[0].size
    dx = np.zeros(k)
    dy = np.zeros(k)
    dyaw = np.zeros(k)
    for ax, vals in zip(grid.axes, flat):
        if ax.axis == "longitudinal":
            dx = vals
        elif ax.axis == "lateral":
            dy = vals
        else:
            dyaw = vals

    cos = np.cos(dyaw)
    sin = np.sin(dyaw)
    rotz = np.zeros((k, 3, 3))
    rotz[:, 0, 0] = cos
    rotz[:, 0, 1] = -sin
    rotz[:, 1, 0] = sin
    rotz[:, 1, 1] = cos
    rotz[:, 2, 2] = 1.0
    rotations = np.matmul(coarse.rotation[None], rotz)

    offsets_body = np.stack([dx, dy, np.zeros(k)], axis=1)
    translations = offsets_body @ coarse.rotation.T + coarse.translation

    disp2 = dx * dx + dy * dy + dyaw * dyaw
    offsets = np.stack([dx, dy, dyaw], axis=1)
    return rotations, translations, offsets, disp2


def grid_search_refine(
    coarse: Pose,
    grid: GridSpec,
    cameras,
    costmaps,
    points,
    min_visible: float = DEFAULT_MIN_VISIBLE,
) -> CostEvaluation:
    """Exhaustive search over the grid; global minimum of the mean residual,
    ties broken by smaller displacement from the coarse pose, then by lower
    canonical grid index."""
    if not points:
        raise NoVisiblePoints("no points supplied")
    rotations, translations, _, disp2 = grid_candidates(coarse, grid)
    positions, groups = _group_by_class(points)
    k = rotations.shape[0]
    mean = np.empty(k)
    visfrac = np.empty(k)
    for start in range(0, k, _CHUNK):
        sl = slice(start, min(start + _CHUNK, k))
        mean[sl], visfrac[sl] = _evaluate_batch(
            rotations[sl], translations[sl], cameras, costmaps, positions, groups
        )
    valid = (visfrac >= min_visible) & np.isfinite(mean)
    if not valid.any():
        raise AllCandidatesInvalid(
            f"all {k} grid candidates below min_visible={min_visible}"
        )
    order = np.lexsort((np.arange(k), disp2, mean))
    best = next(i for i in order if valid[i])
    pose = Pose(rotations[best].copy(), translations[best].copy())
    return CostEvaluation(pose, float(mean[best]), float(visfrac[best]), len(points))


def cap_points(points, max_points: int = DEFAULT_MAX_POINTS):
    """Deterministic stride subsample keeping at most max_points."""
    if len(points) <= max_points:
        return list(points)
    stride = math.ceil(len(points) / max_points)
    return list(points[::stride])
