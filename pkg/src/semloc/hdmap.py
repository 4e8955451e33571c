"""Vector map model: typed 3D polylines, file I/O, spatial queries, sampling.

A map is a flat list of landmarks, each an ordered polyline of world-frame
points tagged with one of three semantic classes. Signboard outlines are
closed: the segment from the last point back to the first is implied and
never stored.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError, ValidationError
from .geometry import Pose

MAP_HEADER = "semloc-map 1"
DEFAULT_CROP_RANGE = 80.0
DEFAULT_SAMPLE_INTERVAL = 0.5
DEFAULT_FORWARD_BIAS = 30.0


class LandmarkClass(enum.Enum):
    LANE_MARKING = "lane_marking"
    POLE = "pole"
    SIGNBOARD = "signboard"


@dataclass(frozen=True)
class Landmark:
    id: int
    cls: LandmarkClass
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        min_points = 3 if self.cls is LandmarkClass.SIGNBOARD else 2
        if len(pts) < min_points:
            raise ValidationError(
                f"landmark {self.id}: {self.cls.value} needs >= {min_points} points"
            )
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if self.closed:
            gaps = np.append(gaps, np.linalg.norm(pts[0] - pts[-1]))
        if np.any(gaps <= 1e-6):
            raise ValidationError(f"landmark {self.id}: consecutive duplicate points")

    @property
    def closed(self) -> bool:
        return self.cls is LandmarkClass.SIGNBOARD

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        if self.closed:
            a = self.points
            b = np.roll(self.points, -1, axis=0)
        else:
            a, b = self.points[:-1], self.points[1:]
        return a, b

    def distance_to(self, q: np.ndarray) -> float:
        a, b = self.segments()
        d = b - a
        t = np.einsum("ij,ij->i", q - a, d) / np.einsum("ij,ij->i", d, d)
        proj = a + np.clip(t, 0.0, 1.0)[:, None] * d
        return float(np.linalg.norm(proj - q, axis=1).min())


@dataclass(frozen=True)
class SampledPoint:
    position: np.ndarray
    cls: LandmarkClass
    source_id: int
    arclength: float


class HdMap:
    """Immutable landmark collection with a centroid k-d tree.

    Queries pre-filter by centroid distance inflated with each landmark's
    bounding radius, then confirm with exact point-to-polyline distances, so
    results match a linear scan.
    """

    def __init__(self, landmarks: list[Landmark]):
        ids = [lm.id for lm in landmarks]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate landmark ids")
        self.landmarks = list(landmarks)
        if self.landmarks:
            self._centroids = np.array([lm.points.mean(axis=0) for lm in self.landmarks])
            self._bound_radii = np.array([
                np.linalg.norm(lm.points - c, axis=1).max()
                for lm, c in zip(self.landmarks, self._centroids)
            ])
            self._tree = cKDTree(self._centroids)
            self._max_bound = float(self._bound_radii.max())
        else:
            self._tree = None
            self._max_bound = 0.0

    def __len__(self) -> int:
        return len(self.landmarks)

    def query_radius(self, center: np.ndarray, radius: float) -> list[Landmark]:
        if radius <= 0.0:
            raise ValidationError("radius must be positive")
        if self._tree is None:
            return []
        center = np.asarray(center, dtype=float).reshape(3)
        idx = self._tree.query_ball_point(center, radius + self._max_bound)
        hits = []
        for i in idx:
            if np.linalg.norm(self._centroids[i] - center) > radius + self._bound_radii[i]:
                continue
            lm = self.landmarks[i]
            if lm.distance_to(center) <= radius:
                hits.append(lm)
        hits.sort(key=lambda lm: lm.id)
        return hits


def sample_polyline(lm: Landmark, interval: float) -> list[SampledPoint]:
    """Points along the polyline with arclength spacing <= interval.

    Each segment is subdivided evenly on its own, so every original vertex is
    itself a sample; this keeps corner geometry and makes resampling the
    samples a no-op. Open polylines include both endpoints; closed outlines
    wrap around without duplicating the start.
    """
    if interval <= 0.0:
        raise ValidationError("interval must be positive")
    a, b = lm.segments()
    seg_len = np.linalg.norm(b - a, axis=1)
    samples: list[SampledPoint] = []
    arc = 0.0
    for start, end, length in zip(a, b, seg_len):
        pieces = max(int(np.ceil(length / interval)), 1)
        for j in range(pieces):
            frac = j / pieces
            samples.append(
                SampledPoint(start + frac * (end - start), lm.cls, lm.id, arc + frac * length)
            )
        arc += length
    if not lm.closed:
        samples.append(SampledPoint(lm.points[-1].copy(), lm.cls, lm.id, arc))
    return samples


def crop_local_map(
    hdmap: HdMap,
    pose_wb: Pose,
    crop_range: float = DEFAULT_CROP_RANGE,
    interval: float = DEFAULT_SAMPLE_INTERVAL,
    forward_bias: float = DEFAULT_FORWARD_BIAS,
) -> list[SampledPoint]:
    """Sampled landmark points inside a disc ahead of the vehicle.

    The disc is centered forward_bias meters along the body x axis, which
    weights the crop toward what a forward camera can see; ordering is
    deterministic regardless of landmark storage order.
    """
    center = pose_wb.translation + forward_bias * pose_wb.rotation[:, 0]
    samples: list[SampledPoint] = []
    for lm in hdmap.query_radius(center, crop_range):
        samples.extend(sample_polyline(lm, interval))
    samples.sort(key=lambda s: (s.cls.value, s.source_id, s.arclength))
    return samples


def save_map(hdmap: HdMap, path: str | Path) -> None:
    lines = [MAP_HEADER]
    for lm in hdmap.landmarks:
        coords = " ".join(f"{v:.9f}" for v in lm.points.ravel())
        lines.append(f"landmark {lm.id} {lm.cls.value} {len(lm.points)} {coords}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_map(path: str | Path) -> HdMap:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"map file not found: {path}")
    landmarks = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != MAP_HEADER:
            raise ParseError(f"{path}:1: bad header {header!r}")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if tokens[0] != "landmark" or len(tokens) < 4:
                raise ParseError(f"{path}:{lineno}: expected a landmark record")
            try:
                lm_id = int(tokens[1])
                cls = LandmarkClass(tokens[2])
                n = int(tokens[3])
                coords = [float(v) for v in tokens[4:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if len(coords) != 3 * n:
                raise ParseError(
                    f"{path}:{lineno}: expected {3 * n} coordinates, got {len(coords)}"
                )
            try:
                landmarks.append(Landmark(lm_id, cls, np.array(coords).reshape(n, 3)))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return HdMap(landmarks)
