"""Synthetic world: procedural vector maps, ground-truth trajectories,
rendered per-camera semantic masks, and noisy odometry/GPS streams.

Roads are built from piecewise-constant-curvature segments with closed-form
arc geometry, so generated lane points sit exactly on their defining circles
and every run is reproducible bit for bit from (spec, seed). Masks are pure
geometric rasterizations of the map (no occlusion): a pixel is occupied when
it lies within the stroke width of a projected landmark of that class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .costmap import SegMask
from .errors import InvalidSpec, ParseError
from .geometry import (
    DEFAULT_Z_MIN,
    CameraModel,
    Pose,
    camera_rotation,
    quat_from_rotation,
    rot_z,
    rotation_from_quat,
    so3_exp,
    so3_log,
)
from .hdmap import HdMap, Landmark, LandmarkClass, load_map, save_map

DEFAULT_STEP_M = 2.2
DEFAULT_DT = 0.1
DEFAULT_THICKNESS = 3
DEFAULT_RENDER_RANGE = 200.0
_CHUNK_LEN_M = 60.0
_VERTEX_SPACING_M = 1.0
_POLE_MARGIN_M = 1.0
_BOARD_Z = (5.0, 6.5)
_SUBPIXEL_SHIFT = 4


@dataclass(frozen=True)
class WorldSpec:
    """Procedural road description.

    segments: (length_m, curvature_1_per_m) pairs; positive curvature turns
    left. Poles line both road edges every pole_spacing meters (0 disables),
    signboards span the road at the listed arclengths.
    """

    lane_count: int = 2
    lane_width: float = 3.5
    segments: tuple = ((500.0, 0.0),)
    pole_spacing: float = 30.0
    signboard_arclengths: tuple = ()
    seed: int = 0

    def validate(self) -> None:
        if self.lane_count < 1:
            raise InvalidSpec("lane_count must be >= 1")
        if self.lane_width <= 0:
            raise InvalidSpec("lane_width must be positive")
        if not self.segments:
            raise InvalidSpec("need at least one road segment")
        for length, _ in self.segments:
            if length <= 0:
                raise InvalidSpec("segment lengths must be positive")
        if self.pole_spacing < 0:
            raise InvalidSpec("pole_spacing must be >= 0")
        total = sum(length for length, _ in self.segments)
        for s in self.signboard_arclengths:
            if not 0.0 <= s <= total:
                raise InvalidSpec(f"signboard arclength {s} outside [0, {total}]")


@dataclass(frozen=True)
class SensorNoiseSpec:
    """Noise applied to the simulated sensors.

    odom_trans_sigma / odom_yaw_sigma scale with distance traveled (per-meter
    white noise); odom_scale_sigma draws one multiplicative scale bias per
    sequence, the dominant systematic error of wheel odometry. GPS noise is a
    first-order Gauss-Markov process with time constant gps_tau seconds
    (gps_tau = 0 gives white noise); dropout marks fixes invalid.
    mask_flip_prob flips individual mask pixels to emulate segmentation error.
    """

    odom_trans_sigma: float = 0.0
    odom_yaw_sigma: float = 0.0
    gps_xy_sigma: float = 0.0
    gps_dropout: float = 0.0
    gps_tau: float = 60.0
    odom_scale_sigma: float = 0.0
    mask_flip_prob: float = 0.0

    def validate(self) -> None:
        for name in (
            "odom_trans_sigma",
            "odom_yaw_sigma",
            "gps_xy_sigma",
            "gps_tau",
            "odom_scale_sigma",
            "mask_flip_prob",
        ):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be >= 0")
        if not 0.0 <= self.gps_dropout <= 1.0:
            raise InvalidSpec("gps_dropout must lie in [0,1]")


@dataclass
class FrameBundle:
    """Sensor data for one frame.

    odometry is the measured increment from this frame's pose to the next
    frame's pose (identity on the final frame). gps_xy is only meaningful
    when gps_valid is set. masks: camera name -> class -> SegMask.
    """

    timestamp: float
    masks: dict
    odometry: Pose
    gps_xy: np.ndarray
    gps_valid: bool
    gt_pose: Pose


def _centerline_state(segments, s):
    """Closed-form position (x, y) and heading at arclength s."""
    x, y, heading = 0.0, 0.0, 0.0
    remaining = s
    for length, kappa in segments:
        d = min(remaining, length)
        if kappa == 0.0:
            x += d * math.cos(heading)
            y += d * math.sin(heading)
        else:
            r = 1.0 / kappa
            cx = x - r * math.sin(heading)
            cy = y + r * math.cos(heading)
            heading_new = heading + kappa * d
            x = cx + r * math.sin(heading_new)
            y = cy - r * math.cos(heading_new)
            heading = heading_new
        remaining -= d
        if remaining <= 1e-12:
            break
    return x, y, heading


def _offset_xy(segments, s, lateral):
    x, y, heading = _centerline_state(segments, s)
    return (
        x - lateral * math.sin(heading),
        y + lateral * math.cos(heading),
        heading,
    )


def generate_world(spec: WorldSpec):
    """Build the vector map and the ground-truth trajectory.

    Returns (HdMap, list of Pose). The vehicle drives the center of the
    rightmost lane; lane boundaries, edge poles, and overhead signboards are
    emitted as landmarks.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    total = sum(length for length, _ in spec.segments)
    half = spec.lane_count / 2.0

    landmarks = []
    next_id = 1

    # Lane boundaries: lane_count + 1 polylines, chunked into map landmarks.
    s_values = np.arange(0.0, total + 1e-9, _VERTEX_SPACING_M)
    if s_values[-1] < total - 1e-9:
        s_values = np.append(s_values, total)
    for j in range(spec.lane_count + 1):
        lateral = (j - half) * spec.lane_width
        pts = np.array([_offset_xy(spec.segments, s, lateral)[:2] + (0.0,) for s in s_values])
        chunk = max(2, int(round(_CHUNK_LEN_M / _VERTEX_SPACING_M)))
        start = 0
        while start < len(pts) - 1:
            end = min(start + chunk, len(pts) - 1)
            landmarks.append(
                Landmark(next_id, LandmarkClass.LANE_MARKING, pts[start : end + 1].copy())
            )
            next_id += 1
            start = end

    # Poles along both road edges, staggered half a period.
    if spec.pole_spacing > 0:
        edge = half * spec.lane_width + _POLE_MARGIN_M
        for side, phase in ((1.0, 0.0), (-1.0, 0.5)):
            s = phase * spec.pole_spacing
            while s <= total:
                x, y, _ = _offset_xy(spec.segments, s, side * edge)
                height = float(rng.uniform(5.5, 6.5))
                pts = np.array([[x, y, 0.0], [x, y, height]])
                landmarks.append(Landmark(next_id, LandmarkClass.POLE, pts))
                next_id += 1
                s += spec.pole_spacing

    # Signboards spanning the road overhead.
    board_half = half * spec.lane_width + 0.5
    z_lo, z_hi = _BOARD_Z
    for s in spec.signboard_arclengths:
        xl, yl, _ = _offset_xy(spec.segments, s, board_half)
        xr, yr, _ = _offset_xy(spec.segments, s, -board_half)
        pts = np.array(
            [
                [xl, yl, z_lo],
                [xr, yr, z_lo],
                [xr, yr, z_hi],
                [xl, yl, z_hi],
            ]
        )
        landmarks.append(Landmark(next_id, LandmarkClass.SIGNBOARD, pts))
        next_id += 1

    # Trajectory: center of the rightmost lane, yaw follows the road.
    vehicle_lateral = (0.5 - half) * spec.lane_width
    poses = []
    s = 0.0
    while s <= total + 1e-9:
        x, y, heading = _offset_xy(spec.segments, min(s, total), vehicle_lateral)
        poses.append(Pose(rot_z(heading), np.array([x, y, 0.0])))
        s += DEFAULT_STEP_M

    return HdMap(landmarks), poses


def _clip_segment_near(a, b, z_min):
    a_in = a[2] >= z_min
    b_in = b[2] >= z_min
    if not a_in and not b_in:
        return None
    if a_in and b_in:
        return a, b
    t = (z_min - a[2]) / (b[2] - a[2])
    p = a + t * (b - a)
    return (a, p) if a_in else (p, b)


def _clip_polygon_near(pts, z_min):
    out = []
    n = len(pts)
    for i in range(n):
        a = pts[i]
        b = pts[(i + 1) % n]
        a_in = a[2] >= z_min
        b_in = b[2] >= z_min
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (z_min - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if len(out) >= 3 else None


def _to_pixels(cam, pts_c):
    u = cam.fx * pts_c[:, 0] / pts_c[:, 2] + cam.cx
    v = cam.fy * pts_c[:, 1] / pts_c[:, 2] + cam.cy
    scale = 1 << _SUBPIXEL_SHIFT
    uv = np.stack([u, v], axis=1) * scale
    return np.round(np.clip(uv, -2e8, 2e8)).astype(np.int32)


def render_masks(
    hdmap: HdMap,
    cam: CameraModel,
    pose_wb: Pose,
    thickness: int = DEFAULT_THICKNESS,
    render_range: float = DEFAULT_RENDER_RANGE,
) -> dict:
    """Rasterize all landmarks within render_range into one binary mask per
    class. Lanes and poles are stroked polylines; signboards are filled
    polygons so the mask matches a dense segmentation of the board face.
    """
    pose_cw = pose_wb.compose(cam.extrinsic_bc).inverse()
    images = {
        cls: np.zeros((cam.height, cam.width), dtype=np.uint8) for cls in LandmarkClass
    }
    stroke = 2 * thickness + 1
    for lm in hdmap.query_radius(pose_wb.translation, render_range):
        pts_c = pose_cw.apply(lm.points)
        img = images[lm.cls]
        if lm.cls is LandmarkClass.SIGNBOARD:
            poly = _clip_polygon_near(pts_c, DEFAULT_Z_MIN)
            if poly is None:
                continue
            cv2.fillPoly(img, [_to_pixels(cam, poly)], 1, lineType=cv2.LINE_8, shift=_SUBPIXEL_SHIFT)
            continue
        for i in range(len(lm.points) - 1):
            seg = _clip_segment_near(pts_c[i], pts_c[i + 1], DEFAULT_Z_MIN)
            if seg is None:
                continue
            px = _to_pixels(cam, np.array(seg))
            cv2.line(
                img,
                tuple(px[0]),
                tuple(px[1]),
                1,
                thickness=stroke,
                lineType=cv2.LINE_8,
                shift=_SUBPIXEL_SHIFT,
            )
    return {
        cls: SegMask(cam.width, cam.height, cls, img) for cls, img in images.items()
    }


def simulate_sequence(
    hdmap: HdMap,
    trajectory: list,
    cameras: list,
    noise: SensorNoiseSpec,
    seed: int,
    dt: float = DEFAULT_DT,
    thickness: int = DEFAULT_THICKNESS,
) -> list:
    """Render masks and sample noisy sensors along the trajectory.

    Deterministic per (inputs, seed): the RNG is consumed in a fixed order.
    """
    noise.validate()
    rng = np.random.default_rng(seed)
    scale_bias = (
        float(rng.normal(0.0, noise.odom_scale_sigma)) if noise.odom_scale_sigma > 0 else 0.0
    )
    alpha = math.exp(-dt / noise.gps_tau) if noise.gps_tau > 0 else 0.0
    gps_bias = rng.normal(0.0, noise.gps_xy_sigma, size=2)

    bundles = []
    n = len(trajectory)
    for k, pose in enumerate(trajectory):
        masks = {
            cam.name: render_masks(hdmap, cam, pose, thickness) for cam in cameras
        }
        if noise.mask_flip_prob > 0:
            for per_cls in masks.values():
                for cls, mask in per_cls.items():
                    flips = rng.random(mask.data.shape) < noise.mask_flip_prob
                    per_cls[cls] = SegMask(
                        mask.width, mask.height, cls, mask.data ^ flips.astype(np.uint8)
                    )

        if k < n - 1:
            inc = pose.inverse().compose(trajectory[k + 1])
            dist = float(np.linalg.norm(inc.translation))
            t_noise = np.array(
                [
                    rng.normal(0.0, noise.odom_trans_sigma * dist),
                    rng.normal(0.0, noise.odom_trans_sigma * dist),
                    0.0,
                ]
            )
            yaw_noise = float(rng.normal(0.0, noise.odom_yaw_sigma * dist))
            odom = Pose(
                inc.rotation @ rot_z(yaw_noise),
                (1.0 + scale_bias) * inc.translation + t_noise,
            )
        else:
            odom = Pose.identity()

        innovation = rng.normal(0.0, noise.gps_xy_sigma, size=2)
        if k > 0:
            gps_bias = alpha * gps_bias + math.sqrt(max(0.0, 1.0 - alpha * alpha)) * innovation
        gps_valid = bool(rng.random() >= noise.gps_dropout)
        gps_xy = pose.translation[:2] + gps_bias

        bundles.append(
            FrameBundle(
                timestamp=k * dt,
                masks=masks,
                odometry=odom,
                gps_xy=gps_xy,
                gps_valid=gps_valid,
                gt_pose=pose,
            )
        )
    return bundles


def blank_masks(bundles: list, camera_names=None, start: int = 0, end: int = None) -> None:
    """Zero out masks in frames [start, end) for the given cameras (all by
    default), emulating severe occlusion or a failed segmentation feed."""
    end = len(bundles) if end is None else end
    for bundle in bundles[start:end]:
        for name, per_cls in bundle.masks.items():
            if camera_names is not None and name not in camera_names:
                continue
            for cls, mask in per_cls.items():
                per_cls[cls] = SegMask.empty(mask.width, mask.height, cls)


def default_cameras(front_only: bool = False) -> list:
    """Forward and rear pinhole cameras on the vehicle roof."""
    intr = dict(fx=320.0, fy=320.0, cx=320.0, cy=240.0, width=640, height=480)
    front = CameraModel(
        extrinsic_bc=Pose(camera_rotation(0.0, 0.0), np.array([1.5, 0.0, 1.4])),
        name="front",
        **intr,
    )
    if front_only:
        return [front]
    rear = CameraModel(
        extrinsic_bc=Pose(camera_rotation(math.pi, 0.0), np.array([-1.5, 0.0, 1.4])),
        name="rear",
        **intr,
    )
    return [front, rear]


# ---------------------------------------------------------------------------
# Sequence directory I/O.


def write_sequence(out_dir, hdmap: HdMap, bundles: list, cameras: list) -> None:
    """Persist a simulated sequence: map.txt, cameras.txt, sensors.txt,
    ref.txt (ground truth), and masks/ as PNG files."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    save_map(hdmap, out / "map.txt")

    with open(out / "cameras.txt", "w") as fh:
        for cam in cameras:
            q = quat_from_rotation(cam.extrinsic_bc.rotation)
            t = cam.extrinsic_bc.translation
            fh.write(
                f"{cam.name} {cam.fx} {cam.fy} {cam.cx} {cam.cy} "
                f"{cam.width} {cam.height} "
                f"{t[0]} {t[1]} {t[2]} {q[0]} {q[1]} {q[2]} {q[3]}\n"
            )

    with open(out / "sensors.txt", "w") as fh:
        fh.write("# timestamp odo_t(3) odo_r(3) gps(2) gps_valid gt_t(3) gt_q(4)\n")
        for bundle in bundles:
            ot = bundle.odometry.translation
            orv = so3_log(bundle.odometry.rotation)
            g = bundle.gps_xy
            gt = bundle.gt_pose.translation
            gq = quat_from_rotation(bundle.gt_pose.rotation)
            fh.write(
                f"{bundle.timestamp:.6f} "
                f"{ot[0]:.9f} {ot[1]:.9f} {ot[2]:.9f} "
                f"{orv[0]:.12f} {orv[1]:.12f} {orv[2]:.12f} "
                f"{g[0]:.6f} {g[1]:.6f} {int(bundle.gps_valid)} "
                f"{gt[0]:.9f} {gt[1]:.9f} {gt[2]:.9f} "
                f"{gq[0]:.12f} {gq[1]:.12f} {gq[2]:.12f} {gq[3]:.12f}\n"
            )

    with open(out / "ref.txt", "w") as fh:
        for bundle in bundles:
            t = bundle.gt_pose.translation
            q = quat_from_rotation(bundle.gt_pose.rotation)
            fh.write(
                f"{bundle.timestamp:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}\n"
            )

    for k, bundle in enumerate(bundles):
        for cam_name, per_cls in bundle.masks.items():
            for cls, mask in per_cls.items():
                path = out / "masks" / f"{k:06d}_{cam_name}_{cls.value}.png"
                cv2.imwrite(str(path), mask.data * 255)


def load_sequence(seq_dir):
    """Load a sequence written by write_sequence.

    Returns (HdMap, list of FrameBundle, list of CameraModel).
    """
    seq = Path(seq_dir)
    hdmap = load_map(seq / "map.txt")

    cameras = []
    with open(seq / "cameras.txt") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            name = parts[0]
            vals = [float(x) for x in parts[1:]]
            if len(vals) != 13:
                raise ParseError(f"{seq / 'cameras.txt'}: bad camera line: {line!r}")
            rot = rotation_from_quat(np.array(vals[9:13]))
            cameras.append(
                CameraModel(
                    fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                    width=int(vals[4]), height=int(vals[5]),
                    extrinsic_bc=Pose(rot, np.array(vals[6:9])),
                    name=name,
                )
            )

    bundles = []
    with open(seq / "sensors.txt") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 17:
                raise ParseError(f"{seq / 'sensors.txt'}: bad sensor line: {line!r}")
            odom = Pose(so3_exp(np.array(vals[4:7])), np.array(vals[1:4]))
            gt = Pose(rotation_from_quat(np.array(vals[13:17])), np.array(vals[10:13]))
            bundles.append(
                FrameBundle(
                    timestamp=vals[0],
                    masks={},
                    odometry=odom,
                    gps_xy=np.array(vals[7:9]),
                    gps_valid=bool(int(vals[9])),
                    gt_pose=gt,
                )
            )

    for k, bundle in enumerate(bundles):
        per_cam = {}
        for cam in cameras:
            per_cls = {}
            for cls in LandmarkClass:
                path = seq / "masks" / f"{k:06d}_{cam.name}_{cls.value}.png"
                if not path.exists():
                    raise ParseError(f"missing mask file {path}")
                img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
                per_cls[cls] = SegMask(
                    cam.width, cam.height, cls, (img > 127).astype(np.uint8)
                )
            per_cam[cam.name] = per_cls
        bundle.masks = per_cam

    return hdmap, bundles, cameras
