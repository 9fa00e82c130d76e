"""Kinematic skeleton for articulated figures.

24 joints: a free root at the pelvis plus 23 ordinary joints, each storing a
transform relative to its parent. Forward kinematics composes parent chains
root to leaf. Bone lengths are carried at unit scale and multiplied by a
per-figure metric scale once it is known.

Surface geometry is a capsule sweep per bone; the anchor table it produces
(attachment joint, local offset, local frame, spacing) seeds one Gaussian per
anchor when a figure is instantiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, quat_normalize

JOINT_NAMES = [
    "pelvis", "hip_l", "hip_r", "spine_lower", "knee_l", "knee_r", "spine_mid",
    "ankle_l", "ankle_r", "spine_upper", "foot_l", "foot_r", "neck",
    "clavicle_l", "clavicle_r", "head", "shoulder_l", "shoulder_r", "elbow_l",
    "elbow_r", "wrist_l", "wrist_r", "hand_l", "hand_r",
]

PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17,
            18, 19, 20, 21]

N_JOINTS = 24

# joint offsets from the parent joint at unit scale; skeleton frame is y-up,
# x to the figure's left, z forward
REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.09, -0.06, 0.00],   # hip_l
    [-0.09, -0.06, 0.00],  # hip_r
    [0.00, 0.11, 0.00],    # spine_lower
    [0.00, -0.38, 0.00],   # knee_l
    [0.00, -0.38, 0.00],   # knee_r
    [0.00, 0.13, 0.00],    # spine_mid
    [0.00, -0.40, 0.00],   # ankle_l
    [0.00, -0.40, 0.00],   # ankle_r
    [0.00, 0.05, 0.00],    # spine_upper
    [0.00, -0.06, 0.12],   # foot_l
    [0.00, -0.06, 0.12],   # foot_r
    [0.00, 0.21, 0.00],    # neck
    [0.08, 0.11, 0.00],    # clavicle_l
    [-0.08, 0.11, 0.00],   # clavicle_r
    [0.00, 0.07, 0.00],    # head
    [0.10, 0.00, 0.00],    # shoulder_l
    [-0.10, 0.00, 0.00],   # shoulder_r
    [0.26, 0.00, 0.00],    # elbow_l
    [-0.26, 0.00, 0.00],   # elbow_r
    [0.25, 0.00, 0.00],    # wrist_l
    [-0.25, 0.00, 0.00],   # wrist_r
    [0.08, 0.00, 0.00],    # hand_l
    [-0.08, 0.00, 0.00],   # hand_r
])

# capsule radius at unit scale for the bone ending at each non-root joint
BONE_RADIUS = {
    1: 0.09, 2: 0.09, 3: 0.10, 4: 0.07, 5: 0.07, 6: 0.11, 7: 0.05, 8: 0.05,
    9: 0.11, 10: 0.035, 11: 0.035, 12: 0.05, 13: 0.05, 14: 0.05, 15: 0.09,
    16: 0.045, 17: 0.045, 18: 0.04, 19: 0.04, 20: 0.035, 21: 0.035,
    22: 0.03, 23: 0.03,
}


@dataclass
class SkeletonPose:
    """Root transform plus 23 parent-relative joint transforms.

    The root maps the skeleton frame into camera (observations) or world
    (simulator scripts); which one is context. Ordinary joint translations
    carry the bone offsets, so a chain product is the whole of forward
    kinematics.
    """

    root: RigidTransform
    joints: tuple  # 23 RigidTransforms, index j-1 for joint j

    def __post_init__(self):
        if len(self.joints) != N_JOINTS - 1:
            raise ValueError(f"expected 23 joint transforms, got {len(self.joints)}")

    def copy(self) -> "SkeletonPose":
        return SkeletonPose(
            RigidTransform(self.root.q, self.root.t),
            tuple(RigidTransform(j.q, j.t) for j in self.joints),
        )

    def rescaled(self, factor: float) -> "SkeletonPose":
        """Multiply every translation (root included) by a metric factor."""
        return SkeletonPose(
            RigidTransform(self.root.q, self.root.t * factor),
            tuple(RigidTransform(j.q, j.t * factor) for j in self.joints),
        )


def rest_pose(scale: float = 1.0) -> SkeletonPose:
    joints = tuple(
        RigidTransform(t=REST_OFFSETS[j] * scale) for j in range(1, N_JOINTS)
    )
    return SkeletonPose(RigidTransform(), joints)


def fk(pose: SkeletonPose) -> list[RigidTransform]:
    """Global transform of every joint in the skeleton frame (root excluded;
    apply pose.root on the outside)."""
    out: list[RigidTransform] = [RigidTransform()]
    for j in range(1, N_JOINTS):
        out.append(out[PARENTS[j]].compose(pose.joints[j - 1]))
    return out


def joint_positions(pose: SkeletonPose, with_root: bool = False) -> np.ndarray:
    """(24, 3) joint positions, in skeleton frame or through the root."""
    glob = fk(pose)
    pts = np.stack([g.t for g in glob])
    if with_root:
        pts = pose.root.apply(pts)
    return pts


def pose_variation(pose_t: SkeletonPose, pose_t1: SkeletonPose) -> list[RigidTransform]:
    """Per-joint motion between two poses of the same skeleton.

    For joint i the chain products over the parent chain (root to leaf,
    including i) are composed as chain(t+1) * chain(t)^-1, which is the rigid
    motion of joint i's frame between the two instants. Composes across time:
    variation(a, c) = variation(b, c) * variation(a, b), joint-wise.
    """
    ga = fk(pose_t)
    gb = fk(pose_t1)
    return [gb[j].compose(ga[j].inverse()) for j in range(1, N_JOINTS)]


def variation_to_array(var: list[RigidTransform]) -> np.ndarray:
    """Flatten 23 joint motions to (23, 7): quaternion then translation."""
    out = np.zeros((N_JOINTS - 1, 7))
    for i, tf in enumerate(var):
        out[i, :4] = tf.q
        out[i, 4:] = tf.t
    return out


@dataclass
class AnchorTable:
    """Capsule-surface sample points that seed the figure's Gaussians."""

    joint: np.ndarray        # (A,) attachment joint (the bone's parent)
    offset: np.ndarray       # (A, 3) position in the attachment joint frame
    rotation: np.ndarray     # (A, 4) local frame quaternion
    spacing: np.ndarray      # (A,) sample spacing, used as the seed scale
    bone: np.ndarray         # (A,) the bone's child joint, for coloring

    def __len__(self) -> int:
        return int(self.joint.shape[0])


def _orthonormal(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def build_anchor_table(scale: float = 1.0, ring_size: int = 8,
                       ring_spacing: float = 0.023) -> AnchorTable:
    """Sweep a capsule along every bone and sample its surface in rings.

    Anchors attach to the bone's parent joint, whose rotation is what moves
    the bone. Roughly 1.5k anchors at the defaults.
    """
    joints, offsets, rotations, spacings, bones = [], [], [], [], []
    for child in range(1, N_JOINTS):
        parent = PARENTS[child]
        vec = REST_OFFSETS[child] * scale
        length = float(np.linalg.norm(vec))
        radius = BONE_RADIUS[child] * scale
        if length < 1e-9:
            continue
        axis = vec / length
        u, v = _orthonormal(axis)
        n_rings = max(2, int(round(length / (ring_spacing * scale))))
        arc = 2.0 * np.pi * radius / ring_size
        for r in range(n_rings):
            along = (r + 0.5) / n_rings * length
            for k in range(ring_size):
                ang = 2.0 * np.pi * (k + 0.5 * (r % 2)) / ring_size
                radial = np.cos(ang) * u + np.sin(ang) * v
                pos = axis * along + radius * radial
                # local frame: x along the bone, z outward
                m = np.stack([axis, np.cross(radial, axis), radial], axis=1)
                joints.append(parent)
                offsets.append(pos)
                rotations.append(_matrix_to_quat_safe(m))
                spacings.append(0.5 * max(arc, length / n_rings))
                bones.append(child)
    return AnchorTable(
        joint=np.array(joints, dtype=np.int64),
        offset=np.array(offsets),
        rotation=np.array(rotations),
        spacing=np.array(spacings),
        bone=np.array(bones, dtype=np.int64),
    )


def _matrix_to_quat_safe(m: np.ndarray) -> np.ndarray:
    from .geometry import matrix_to_quat

    # guard against slightly non-orthonormal frames from the cross products
    u, _, vt = np.linalg.svd(m)
    return matrix_to_quat(u @ vt)


def anchors_in_skeleton_frame(table: AnchorTable, pose: SkeletonPose):
    """Anchor positions (A, 3) and orientations (A, 4) under a pose, in the
    skeleton frame."""
    glob = fk(pose)
    pos = np.zeros((len(table), 3))
    rot = np.zeros((len(table), 4))
    for j in np.unique(table.joint):
        sel = table.joint == j
        g = glob[int(j)]
        pos[sel] = g.apply(table.offset[sel])
        rot[sel] = np.stack([
            quat_normalize(np.asarray(_qmul(g.q, q))) for q in table.rotation[sel]
        ])
    return pos, rot


def _qmul(a, b):
    from .geometry import quat_multiply

    return quat_multiply(a, b)


@dataclass
class SkeletonObservation:
    """Per-frame skeletal estimate handed to the tracker.

    pose.root maps skeleton to camera; every translation in it is up to an
    unknown global scale (the norm of the root translation is normalized away
    by the producer). root_pixel locates the root joint on the image.
    """

    pose: SkeletonPose
    root_pixel: np.ndarray  # (2,) u, v

    def copy(self) -> "SkeletonObservation":
        return SkeletonObservation(self.pose.copy(), self.root_pixel.copy())
