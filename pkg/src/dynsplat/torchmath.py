"""Differentiable torch counterparts of the quaternion / SE(3) helpers.

Everything here operates on float64 tensors and stays inside the autograd
graph. Layout conventions match geometry.py: quaternions (w, x, y, z),
tangents (omega, v).
"""

from __future__ import annotations

import numpy as np
import torch

from .geometry import CameraPose, RigidTransform

DTYPE = torch.float64


def to_tensor(arr, requires_grad: bool = False) -> torch.Tensor:
    if isinstance(arr, torch.Tensor):
        t = arr.to(DTYPE)
    else:
        # owned, contiguous, writable storage
        t = torch.from_numpy(np.array(arr, dtype=np.float64, copy=True))
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def quat_normalize_t(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-300)


def quat_multiply_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternions (..., 4) to rotation matrices (..., 3, 3)."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_rotate_t(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate (..., 3) vectors by broadcast-compatible quaternions (..., 4)."""
    qv = q[..., 1:]
    w = q[..., :1]
    uv = torch.cross(qv.expand_as(v), v, dim=-1)
    uuv = torch.cross(qv.expand_as(v), uv, dim=-1)
    return v + 2.0 * (w * uv + uuv)


def so3_exp_t(omega: torch.Tensor) -> torch.Tensor:
    """Axis-angle (3,) tensor to a unit quaternion, smooth at zero."""
    angle_sq = (omega * omega).sum()
    angle = torch.sqrt(angle_sq + 1e-300)
    half = 0.5 * angle
    # sin(x)/x via its series near zero keeps gradients exact and finite
    small = angle < 1e-6
    sinc_half = torch.where(small, 0.5 * (1.0 - angle_sq / 24.0), torch.sin(half) / angle)
    w = torch.where(small, 1.0 - angle_sq / 8.0, torch.cos(half))
    return torch.cat([w.reshape(1), sinc_half * omega])


def se3_exp_t(delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Tangent (6,) to (unit quaternion, translation), differentiable."""
    omega, v = delta[:3], delta[3:]
    q = so3_exp_t(omega)
    angle_sq = (omega * omega).sum()
    angle = torch.sqrt(angle_sq + 1e-300)
    small = angle < 1e-6
    a = torch.where(small, 0.5 - angle_sq / 24.0, (1.0 - torch.cos(angle)) / angle_sq.clamp_min(1e-300))
    b = torch.where(
        small, 1.0 / 6.0 - angle_sq / 120.0, (angle - torch.sin(angle)) / (angle_sq * angle).clamp_min(1e-300)
    )
    wv = torch.cross(omega, v, dim=0)
    wwv = torch.cross(omega, wv, dim=0)
    t = v + a * wv + b * wwv
    return q, t


def pose_tensors(pose) -> tuple[torch.Tensor, torch.Tensor]:
    return to_tensor(pose.q), to_tensor(pose.t)


def perturbed_pose(pose, delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """exp(delta) composed onto a numpy pose; stays differentiable in delta."""
    dq, dt = se3_exp_t(delta)
    q0, t0 = pose_tensors(pose)
    q = quat_multiply_t(dq, q0)
    t = quat_rotate_t(dq.unsqueeze(0), t0.unsqueeze(0)).squeeze(0) + dt
    return q, t


def compose_qt(qa, ta, qb, tb) -> tuple[torch.Tensor, torch.Tensor]:
    """(qa, ta) applied after (qb, tb)."""
    q = quat_multiply_t(qa, qb)
    t = quat_rotate_t(qa.unsqueeze(0), tb.unsqueeze(0)).squeeze(0) + ta
    return q, t


def invert_qt(q, t) -> tuple[torch.Tensor, torch.Tensor]:
    qi = torch.cat([q[:1], -q[1:]])
    ti = -quat_rotate_t(qi.unsqueeze(0), t.unsqueeze(0)).squeeze(0)
    return qi, ti


def transform_points_t(q, t, pts) -> torch.Tensor:
    return quat_rotate_t(q.unsqueeze(0), pts) + t


def pose_from_tensors(q: torch.Tensor, t: torch.Tensor, cls=CameraPose):
    return cls(q.detach().cpu().numpy(), t.detach().cpu().numpy())


def rigid_from_tensors(q: torch.Tensor, t: torch.Tensor) -> RigidTransform:
    return RigidTransform(q.detach().cpu().numpy(), t.detach().cpu().numpy())
