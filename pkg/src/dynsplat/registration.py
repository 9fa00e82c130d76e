"""Closed-form rigid alignment of corresponded 3D point sets.

The solver is the SVD construction with a reflection guard, optionally
weighted. The robust wrapper rejects correspondences whose displacement
deviates from the median by more than a multiple of the median absolute
deviation before solving.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, matrix_to_quat


class DegenerateGeometryError(RuntimeError):
    """Correspondences do not constrain a unique rigid motion."""


def kabsch(src: np.ndarray, dst: np.ndarray,
           weights: np.ndarray | None = None) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst (N >= 3 points)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point sets must both be (N, 3)")
    if src.shape[0] < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")
    if weights is None:
        w = np.ones(src.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (src.shape[0],) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
    w = w / w.sum()

    c_src = w @ src
    c_dst = w @ dst
    a = (src - c_src) * w[:, None]
    b = dst - c_dst
    h = a.T @ b
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1e-300) * 1e-9:
        # all mass on one singular direction: points are collinear
        raise DegenerateGeometryError("correspondence geometry is rank-deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = c_dst - rot @ c_src
    return RigidTransform(matrix_to_quat(rot), t)


def mad_inliers(src: np.ndarray, dst: np.ndarray,
                factor: float = 3.0) -> np.ndarray:
    """Inlier mask: displacement within factor x MAD of the median motion."""
    disp = np.asarray(dst, dtype=np.float64) - np.asarray(src, dtype=np.float64)
    med = np.median(disp, axis=0)
    dev = np.linalg.norm(disp - med, axis=1)
    mad = np.median(dev)
    return dev <= factor * mad + 1e-12


def robust_kabsch(src: np.ndarray, dst: np.ndarray,
                  factor: float = 3.0) -> tuple[RigidTransform, np.ndarray]:
    """Rigid alignment after a single median/MAD rejection pass.

    Returns (transform, inlier mask). Raises DegenerateGeometryError when the
    surviving correspondences cannot pin down a motion.
    """
    keep = mad_inliers(src, dst, factor)
    if keep.sum() < 3:
        raise DegenerateGeometryError("too few correspondences after rejection")
    return kabsch(np.asarray(src)[keep], np.asarray(dst)[keep]), keep


def nearest_pairs(src: np.ndarray, dst: np.ndarray,
                  max_distance: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices (i_src, i_dst) of each src point's nearest dst point within
    max_distance. Each src point contributes at most one pair."""
    tree = cKDTree(np.asarray(dst, dtype=np.float64))
    dist, idx = tree.query(np.asarray(src, dtype=np.float64),
                           distance_upper_bound=max_distance)
    ok = np.isfinite(dist)
    return np.nonzero(ok)[0], idx[ok]
