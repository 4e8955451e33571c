"""Rigid transforms, pinhole projection, and the analytic Jacobians of the aligner.

Conventions used everywhere in this package:

* world/body transforms are ``T_wb`` (body-to-world), cameras mount on the
  body through ``T_bc`` (camera-to-body); a camera-frame point is
  ``p_c = (T_wb * T_bc)^-1 * P_w``.
* the body frame is FLU (x forward, y left, z up); the optical frame is the
  usual z-forward, x-right, y-down.
* tangent vectors are 6-vectors ``(translation, rotation)`` and perturb a
  pose on the right: ``T * exp(delta)``.
* Euler angles compose in Z-Y-X order: ``R = Rz(tz) @ Ry(ty) @ Rx(tx)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, GimbalLock, ValidationError

_SMALL_ANGLE = 1e-8
DEFAULT_Z_MIN = 0.1


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (or a batch of them)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    s, c = np.sin(theta), np.cos(theta)
    return np.eye(3) + (s / theta) * k + ((1.0 - c) / theta**2) * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=float)
    cos_theta = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < _SMALL_ANGLE:
        return vee(rot - rot.T) * 0.5
    if theta > np.pi - 1e-3:
        # Near pi the antisymmetric part loses the axis; recover it from the
        # dominant diagonal of R + I instead.
        a = rot + np.eye(3)
        axis = a[:, int(np.argmax(np.diag(a)))]
        axis = axis / np.linalg.norm(axis)
        # Fix the sign using the (possibly tiny) antisymmetric part.
        w = vee(rot - rot.T)
        if np.dot(w, axis) < 0.0:
            axis = -axis
        return axis * theta
    return vee(rot - rot.T) * (theta / (2.0 * np.sin(theta)))


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    s, c = np.sin(theta), np.cos(theta)
    return (
        np.eye(3)
        + ((1.0 - c) / theta**2) * k
        + ((theta - s) / theta**3) * (k @ k)
    )


def _so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * k + ((1.0 - cot) / theta**2) * (k @ k)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``apply(p) = rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    @classmethod
    def exp(cls, tangent: np.ndarray) -> "Pose":
        tangent = np.asarray(tangent, dtype=float).reshape(6)
        rho, phi = tangent[:3], tangent[3:]
        return cls(so3_exp(phi), _so3_left_jacobian(phi) @ rho)

    def log(self) -> np.ndarray:
        phi = so3_log(self.rotation)
        rho = _so3_left_jacobian_inv(phi) @ self.translation
        return np.concatenate([rho, phi])

    def adjoint(self) -> np.ndarray:
        ad = np.zeros((6, 6))
        ad[:3, :3] = self.rotation
        ad[:3, 3:] = hat(self.translation) @ self.rotation
        ad[3:, 3:] = self.rotation
        return ad

    def validate(self, tol: float = 1e-9) -> None:
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > tol or np.linalg.det(self.rotation) < 0.0:
            raise ValidationError(f"rotation not orthonormal (max error {err:.3e})")

    def as_xyzquat(self) -> np.ndarray:
        """Translation followed by a scalar-last unit quaternion."""
        return np.concatenate([self.translation, quat_from_rotation(self.rotation)])

    @classmethod
    def from_xyzquat(cls, v: np.ndarray) -> "Pose":
        v = np.asarray(v, dtype=float).reshape(7)
        return cls(rotation_from_quat(v[3:]), v[:3])


def quat_from_rotation(rot: np.ndarray) -> np.ndarray:
    """Scalar-last quaternion (x, y, z, w) of a rotation matrix."""
    rot = np.asarray(rot, dtype=float)
    t = np.trace(rot)
    if t > 0.0:
        w = np.sqrt(1.0 + t) * 0.5
        s = 0.25 / w
        q = np.array([
            (rot[2, 1] - rot[1, 2]) * s,
            (rot[0, 2] - rot[2, 0]) * s,
            (rot[1, 0] - rot[0, 1]) * s,
            w,
        ])
    else:
        i = int(np.argmax(np.diag(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + rot[i, i] - rot[j, j] - rot[k, k], 0.0)) * 0.5
        inv = 0.25 / s
        q = np.empty(4)
        q[i] = s
        q[j] = (rot[j, i] + rot[i, j]) * inv
        q[k] = (rot[k, i] + rot[i, k]) * inv
        q[3] = (rot[k, j] - rot[j, k]) * inv
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    q = q / np.linalg.norm(q)
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _drot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class EulerPose:
    """Pose chart with Z-Y-X angles; valid away from pitch = +-pi/2."""

    theta_x: float
    theta_y: float
    theta_z: float
    tx: float
    ty: float
    tz: float

    def to_pose(self) -> Pose:
        rot = rot_z(self.theta_z) @ rot_y(self.theta_y) @ rot_x(self.theta_x)
        return Pose(rot, np.array([self.tx, self.ty, self.tz]))

    @classmethod
    def from_pose(cls, pose: Pose) -> "EulerPose":
        r = pose.rotation
        sy = -r[2, 0]
        theta_y = float(np.arcsin(np.clip(sy, -1.0, 1.0)))
        if abs(theta_y) >= np.pi / 2 - 1e-6:
            raise GimbalLock(f"pitch {theta_y:.6f} too close to +-pi/2")
        theta_x = float(np.arctan2(r[2, 1], r[2, 2]))
        theta_z = float(np.arctan2(r[1, 0], r[0, 0]))
        t = pose.translation
        return cls(theta_x, theta_y, theta_z, float(t[0]), float(t[1]), float(t[2]))


# Axes of a forward-looking optical frame expressed in the FLU body frame:
# optical x -> -body y (right), optical y -> -body z (down), optical z -> body x.
_OPTICAL_IN_BODY = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def camera_rotation(yaw: float = 0.0, pitch: float = 0.0) -> np.ndarray:
    """Mounting rotation R_bc for an optical frame yawed/pitched on an FLU body.

    yaw=0 looks along body +x (forward), yaw=pi looks backward; positive
    pitch tilts the optical axis down.
    """
    return rot_z(yaw) @ rot_y(pitch) @ _OPTICAL_IN_BODY


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic_bc: Pose = field(default_factory=Pose.identity)
    name: str = ""

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValidationError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")


def transform_point(pose_wb: Pose, extrinsic_bc: Pose, p_w: np.ndarray) -> np.ndarray:
    """World point(s) into the camera frame: ``(T_wb * T_bc)^-1 * P_w``."""
    t_cw = pose_wb.compose(extrinsic_bc).inverse()
    return t_cw.apply(p_w)


def project(cam: CameraModel, p_c: np.ndarray, z_min: float = DEFAULT_Z_MIN) -> np.ndarray:
    p_c = np.asarray(p_c, dtype=float)
    z = p_c[..., 2]
    if np.any(z <= z_min):
        raise BehindCamera(f"depth <= {z_min}")
    u = cam.fx * p_c[..., 0] / z + cam.cx
    v = cam.fy * p_c[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project_with_validity(
    cam: CameraModel, p_c: np.ndarray, z_min: float = DEFAULT_Z_MIN
) -> tuple[np.ndarray, np.ndarray]:
    """Batched projection that flags instead of raising.

    Valid means in front of the near plane and inside the bilinear sampling
    domain [0, W-1] x [0, H-1]. Invalid rows hold garbage coordinates.
    """
    p_c = np.asarray(p_c, dtype=float)
    z = p_c[..., 2]
    in_front = z > z_min
    safe_z = np.where(in_front, z, 1.0)
    u = cam.fx * p_c[..., 0] / safe_z + cam.cx
    v = cam.fy * p_c[..., 1] / safe_z + cam.cy
    uv = np.stack([u, v], axis=-1)
    valid = (
        in_front
        & (u >= 0.0)
        & (u <= cam.width - 1.0)
        & (v >= 0.0)
        & (v <= cam.height - 1.0)
    )
    return uv, valid


def jacobian_projection(
    cam: CameraModel, p_c: np.ndarray, z_min: float = DEFAULT_Z_MIN
) -> np.ndarray:
    """Derivative of the pixel coordinates with respect to the camera point."""
    p_c = np.asarray(p_c, dtype=float)
    x, y, z = p_c[..., 0], p_c[..., 1], p_c[..., 2]
    if np.any(z <= z_min):
        raise BehindCamera(f"depth <= {z_min}")
    out = np.zeros(p_c.shape[:-1] + (2, 3))
    inv_z = 1.0 / z
    out[..., 0, 0] = cam.fx * inv_z
    out[..., 0, 2] = -cam.fx * x * inv_z**2
    out[..., 1, 1] = cam.fy * inv_z
    out[..., 1, 2] = -cam.fy * y * inv_z**2
    return out


def jacobian_point_se3(p_c: np.ndarray, extrinsic_cb: Pose) -> np.ndarray:
    """Derivative of the camera point under a right perturbation of T_wb.

    Returns ``-[I | -hat(p_c)] @ Ad(T_cb)``; the leading sign was fixed
    against central finite differences of transform_point (see the geometry
    test suite), with the (translation, rotation) tangent ordering above.
    """
    p_c = np.asarray(p_c, dtype=float)
    base = np.zeros(p_c.shape[:-1] + (3, 6))
    base[..., :, :3] = -np.eye(3)
    base[..., :, 3:] = hat(p_c)
    return base @ extrinsic_cb.adjoint()


def jacobian_point_translation(pose_wb: Pose, extrinsic_bc: Pose) -> np.ndarray:
    """Derivative of the camera point with respect to the world translation."""
    r_cw = (pose_wb.rotation @ extrinsic_bc.rotation).T
    return -r_cw


def jacobian_point_euler(
    pose: EulerPose, extrinsic_bc: Pose, p_w: np.ndarray, axis: str
) -> np.ndarray:
    """Derivative of the camera point with respect to one Z-Y-X Euler angle."""
    if abs(pose.theta_y) >= np.pi / 2 - 1e-6:
        raise GimbalLock("pitch too close to +-pi/2")
    rx_t = rot_x(pose.theta_x).T
    ry_t = rot_y(pose.theta_y).T
    rz_t = rot_z(pose.theta_z).T
    if axis == "x":
        d_rwb_t = _drot_x(pose.theta_x).T @ ry_t @ rz_t
    elif axis == "y":
        d_rwb_t = rx_t @ _drot_y(pose.theta_y).T @ rz_t
    elif axis == "z":
        d_rwb_t = rx_t @ ry_t @ _drot_z(pose.theta_z).T
    else:
        raise ValueError(f"axis must be x, y, or z, got {axis!r}")
    p_w = np.asarray(p_w, dtype=float)
    lever = p_w - np.array([pose.tx, pose.ty, pose.tz])
    # out = (R_cb @ d_rwb_t) @ lever, batched over leading axes of lever.
    return lever @ (d_rwb_t.T @ extrinsic_bc.rotation)
