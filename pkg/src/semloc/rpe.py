"""Relative pose error between an estimated and a reference trajectory.

Pairs are formed by nearest-timestamp association, then for each associated
index i and frame interval d the error transform is

    E = (Q_i^-1 Q_{i+d})^-1 (P_i^-1 P_{i+d})

with Q the reference and P the estimate. Its translation, rotated into the
reference body frame at the pair's first timestamp, splits into longitudinal
(x, along travel) and lateral (y) components; the rotation error is the
angle of E's rotation. Being built from relative motions, the metric is
invariant to any rigid transform applied to a whole trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoAssociations, ValidationError
from .geometry import Pose, so3_log

DEFAULT_INTERVAL = 5
DEFAULT_MAX_TIME_GAP = 0.05


@dataclass(frozen=True)
class Trajectory:
    """Timestamped pose sequence with strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(ts) != len(self.poses):
            raise ValidationError("timestamp/pose count mismatch")
        if len(ts) >= 2 and np.any(np.diff(ts) <= 0.0):
            raise ValidationError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)


@dataclass(frozen=True)
class RpePair:
    time_a: float
    time_b: float
    err_3d: float
    lateral: float
    longitudinal: float
    rotation_deg: float


@dataclass(frozen=True)
class RpeReport:
    frame_interval: int
    pairs: tuple

    def _field(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.pairs])

    @property
    def max_3d(self) -> float:
        return float(self._field("err_3d").max())

    @property
    def mean_3d(self) -> float:
        return float(self._field("err_3d").mean())

    @property
    def median_3d(self) -> float:
        return float(np.median(self._field("err_3d")))

    @property
    def mean_lateral(self) -> float:
        return float(self._field("lateral").mean())

    @property
    def mean_longitudinal(self) -> float:
        return float(self._field("longitudinal").mean())

    @property
    def mean_rotation_deg(self) -> float:
        return float(self._field("rotation_deg").mean())


def save_trajectory(path, trajectory: Trajectory) -> None:
    """One line per pose: timestamp tx ty tz qx qy qz qw (scalar-last)."""
    with open(path, "w") as fh:
        for t, pose in zip(trajectory.timestamps, trajectory.poses):
            v = pose.as_xyzquat()
            fh.write(f"{t:.9f} " + " ".join(f"{x:.9f}" for x in v) + "\n")


def load_trajectory(path) -> Trajectory:
    times = []
    poses = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise ValidationError(f"{path}: expected 8 columns, got {len(vals)}")
            times.append(vals[0])
            poses.append(Pose.from_xyzquat(np.array(vals[1:])))
    return Trajectory(np.array(times), tuple(poses))


def associate(
    estimate: Trajectory, reference: Trajectory, max_gap: float = DEFAULT_MAX_TIME_GAP
):
    """Indices (i_est, i_ref) of nearest-timestamp matches within max_gap.

    Each reference pose is used at most once; estimates walk in order.
    """
    matches = []
    ref_ts = reference.timestamps
    used = -1
    for i, t in enumerate(estimate.timestamps):
        j = int(np.searchsorted(ref_ts, t))
        best = None
        for cand in (j - 1, j):
            if used < cand < len(ref_ts):
                gap = abs(ref_ts[cand] - t)
                if gap <= max_gap and (best is None or gap < best[1]):
                    best = (cand, gap)
        if best is not None:
            matches.append((i, best[0]))
            used = best[0]
    return matches


def compute_rpe(
    estimate: Trajectory,
    reference: Trajectory,
    interval: int = DEFAULT_INTERVAL,
    max_gap: float = DEFAULT_MAX_TIME_GAP,
) -> RpeReport:
    if interval < 1:
        raise ValidationError("interval must be >= 1")
    matches = associate(estimate, reference, max_gap)
    if len(matches) <= interval:
        raise NoAssociations(
            f"{len(matches)} associated frames, need more than {interval}"
        )
    pairs = []
    for k in range(len(matches) - interval):
        ie, ir = matches[k]
        je, jr = matches[k + interval]
        rel_p = estimate.poses[ie].inverse().compose(estimate.poses[je])
        rel_q = reference.poses[ir].inverse().compose(reference.poses[jr])
        err = rel_q.inverse().compose(rel_p)
        # rotate into the reference body frame at the first timestamp
        body = rel_q.rotation @ err.translation
        rot_deg = math.degrees(np.linalg.norm(so3_log(err.rotation)))
        pairs.append(
            RpePair(
                time_a=float(reference.timestamps[ir]),
                time_b=float(reference.timestamps[jr]),
                err_3d=float(np.linalg.norm(err.translation)),
                lateral=float(abs(body[1])),
                longitudinal=float(abs(body[0])),
                rotation_deg=float(rot_deg),
            )
        )
    return RpeReport(frame_interval=interval, pairs=tuple(pairs))


def absolute_errors(estimate: Trajectory, reference: Trajectory, max_gap: float = DEFAULT_MAX_TIME_GAP):
    """Per-match absolute pose error decomposed in the reference body frame.

    Returns (timestamps, err_xyz_body, rot_deg) arrays. Unlike RPE this is
    gauge-dependent; it is what a drift bound has to look at.
    """
    matches = associate(estimate, reference, max_gap)
    if not matches:
        raise NoAssociations("no associated frames")
    times = np.empty(len(matches))
    err_xyz = np.empty((len(matches), 3))
    rot_deg = np.empty(len(matches))
    for k, (ie, ir) in enumerate(matches):
        err = reference.poses[ir].inverse().compose(estimate.poses[ie])
        times[k] = reference.timestamps[ir]
        err_xyz[k] = err.translation
        rot_deg[k] = math.degrees(np.linalg.norm(so3_log(err.rotation)))
    return times, err_xyz, rot_deg
