"""Quaternion and SE(3) primitives shared by every stage of the system.

Conventions used throughout:

  * quaternions are numpy float64 arrays ordered (w, x, y, z), unit norm;
  * a CameraPose maps camera-frame points into the world frame;
  * 6-vector tangents are ordered (omega_x, omega_y, omega_z, v_x, v_y, v_z),
    i.e. rotation first, translation last;
  * pixel coordinates are continuous, the center of pixel (u, v) sits at the
    integer coordinate (u, v).

Rotations live as quaternions everywhere outside rendering; matrices are
produced on demand and never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GeometryError",
    "BehindCameraError",
    "InvalidDepthError",
    "Intrinsics",
    "RigidTransform",
    "CameraPose",
    "quat_identity",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_rotate",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_from_axis_angle",
    "quat_angle",
    "rotate_points",
    "so3_exp",
    "so3_log",
    "se3_exp",
    "se3_log",
    "se3_step",
    "se3_step_clamp_count",
    "reset_se3_step_clamp_count",
    "project",
    "project_points",
    "back_project",
    "back_project_map",
]


class GeometryError(ValueError):
    """Base class for geometric contract violations."""


class BehindCameraError(GeometryError):
    """Raised when a point with non-positive camera-frame depth is projected."""


class InvalidDepthError(GeometryError):
    """Raised when a pixel is back-projected with a non-positive depth."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-300):
        raise GeometryError("cannot normalize a zero quaternion")
    q = q / n
    # fix the double-cover sign so round trips are stable
    if q.ndim == 1:
        if q[0] < 0.0:
            q = -q
    else:
        q = np.where(q[..., :1] < 0.0, -q, q)
    return q


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector(s) v (..., 3) by unit quaternion q (4,)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    qv = q[1:]
    uv = np.cross(qv, v)
    uuv = np.cross(qv, uv)
    return v + 2.0 * (q[0] * uv + uuv)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m) -> np.ndarray:
    """Shepperd's method, stable for all rotation matrices."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-300:
        return quat_identity()
    axis = axis / n
    half = 0.5 * angle
    return quat_normalize(np.concatenate([[math.cos(half)], math.sin(half) * axis]))


def quat_angle(q) -> float:
    """Rotation angle in radians, in [0, pi]."""
    q = quat_normalize(q)
    return 2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0]))


def rotate_points(q, pts) -> np.ndarray:
    """Rotate an (N, 3) array by a unit quaternion."""
    return quat_rotate(q, pts)


# ---------------------------------------------------------------------------
# so(3) / se(3)
# ---------------------------------------------------------------------------


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def so3_exp(omega) -> np.ndarray:
    """Axis-angle 3-vector to unit quaternion."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = np.linalg.norm(omega)
    if angle < 1e-300:
        return quat_identity()
    return quat_from_axis_angle(omega, angle)


def so3_log(q) -> np.ndarray:
    """Unit quaternion to axis-angle 3-vector with angle in [0, pi]."""
    q = quat_normalize(q)
    s = np.linalg.norm(q[1:])
    if s < 1e-300:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, q[0])
    return (angle / s) * q[1:]


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = _hat(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + (1.0 / 6.0) * (W @ W)
    a = (1.0 - math.cos(theta)) / theta**2
    b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * (W @ W)


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = _hat(omega)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * W + (1.0 / 12.0) * (W @ W)
    half = 0.5 * theta
    cot = half / math.tan(half)
    a = (1.0 - cot) / theta**2
    return np.eye(3) - 0.5 * W + a * (W @ W)


def se3_exp(delta) -> "RigidTransform":
    """Tangent 6-vector (omega, v) to a rigid transform."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (6,):
        raise GeometryError(f"expected a 6-vector tangent, got shape {delta.shape}")
    omega, v = delta[:3], delta[3:]
    q = so3_exp(omega)
    t = _left_jacobian(omega) @ v
    return RigidTransform(q, t)


def se3_log(transform: "RigidTransform") -> np.ndarray:
    """Inverse of se3_exp; rotation part has angle in [0, pi]."""
    omega = so3_log(transform.q)
    v = _left_jacobian_inv(omega) @ transform.t
    return np.concatenate([omega, v])


_se3_clamp_count = 0


def se3_step_clamp_count() -> int:
    return _se3_clamp_count


def reset_se3_step_clamp_count() -> None:
    global _se3_clamp_count
    _se3_clamp_count = 0


def se3_step(pose, delta):
    """Left-multiplicative retraction: exp(delta) composed onto pose.

    Rotational tangents with norm above pi are clamped to pi (direction kept)
    and counted; query the counter via se3_step_clamp_count().
    """
    global _se3_clamp_count
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (6,):
        raise GeometryError(f"expected a 6-vector tangent, got shape {delta.shape}")
    rot_norm = np.linalg.norm(delta[:3])
    if rot_norm > math.pi:
        delta = delta.copy()
        delta[:3] *= math.pi / rot_norm
        _se3_clamp_count += 1
    step = se3_exp(delta)
    composed = step.compose(pose)
    return type(pose)(quat_normalize(composed.q), composed.t)


# ---------------------------------------------------------------------------
# rigid transform types
# ---------------------------------------------------------------------------


class _SE3Base:
    """Shared quaternion+translation rigid-motion behaviour."""

    __slots__ = ("q", "t")

    def __init__(self, q=None, t=None):
        self.q = quat_normalize(q) if q is not None else quat_identity()
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = quat_to_matrix(self.q)
        out[:3, 3] = self.t
        return out

    def apply(self, pts) -> np.ndarray:
        """Transform point(s) (..., 3)."""
        return quat_rotate(self.q, np.asarray(pts, dtype=np.float64)) + self.t

    def compose(self, other):
        """self applied after other: (self * other)(x) = self(other(x))."""
        q = quat_multiply(self.q, other.q)
        t = quat_rotate(self.q, other.t) + self.t
        return type(self)(q, t)

    def inverse(self):
        qi = quat_conjugate(self.q)
        return type(self)(qi, -quat_rotate(qi, self.t))

    def rotation_angle(self) -> float:
        return quat_angle(self.q)

    def scaled(self, s: float):
        """Tangent-space fraction of this motion: exp(s * log(self))."""
        tf = se3_exp(s * se3_log(RigidTransform(self.q, self.t)))
        return type(self)(tf.q, tf.t)

    def almost_equal(self, other, rot_tol=1e-9, trans_tol=1e-9) -> bool:
        d = self.inverse().compose(other)
        return d.rotation_angle() <= rot_tol and float(np.linalg.norm(d.t)) <= trans_tol

    def __repr__(self):
        qs = np.array2string(self.q, precision=6, suppress_small=True)
        ts = np.array2string(self.t, precision=6, suppress_small=True)
        return f"{type(self).__name__}(q={qs}, t={ts})"


class RigidTransform(_SE3Base):
    """A rigid motion of space, used for item motion and map corrections."""


class CameraPose(_SE3Base):
    """Camera-to-world transform; .t is the camera center in world coordinates."""

    def world_to_camera(self, pts) -> np.ndarray:
        return self.inverse().apply(pts)


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise GeometryError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


def project(point, K: Intrinsics) -> np.ndarray:
    """Camera-frame point (3,) to continuous pixel (u, v)."""
    point = np.asarray(point, dtype=np.float64)
    z = point[2]
    if z <= 0.0:
        raise BehindCameraError(f"cannot project point with depth {z:.6g}")
    return np.array([K.fx * point[0] / z + K.cx, K.fy * point[1] / z + K.cy])


def project_points(points, K: Intrinsics):
    """Batched projection; returns pixels (N, 2) and a validity mask (z > 0)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    valid = z > 0.0
    zs = np.where(valid, z, 1.0)
    uv = np.stack(
        [K.fx * points[:, 0] / zs + K.cx, K.fy * points[:, 1] / zs + K.cy], axis=-1
    )
    return uv, valid


def back_project(pixel, depth: float, K: Intrinsics) -> np.ndarray:
    """Pixel (u, v) and depth z to camera-frame point (x, y, z)."""
    if depth <= 0.0 or not math.isfinite(depth):
        raise InvalidDepthError(f"invalid depth {depth!r}")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def back_project_map(depth, K: Intrinsics):
    """Back-project a full depth image.

    depth: (H, W) meters, 0 or negative marks invalid pixels.
    Returns points (H, W, 3) camera frame (garbage where invalid) and the
    validity mask (H, W).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    v = np.arange(h, dtype=np.float64)[:, None].repeat(w, axis=1)
    valid = depth > 0.0
    z = np.where(valid, depth, 1.0)
    pts = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=-1)
    return pts, valid
