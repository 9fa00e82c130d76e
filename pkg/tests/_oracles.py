"""Independent reference implementations used as test oracles.

Everything in here is deliberately written against numpy/scipy only, with its
own per-pixel control flow, so the vectorized torch paths are checked against
genuinely separate code. Keep this module free of imports from dynsplat
internals other than plain data types.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.transform import Rotation


def quat_wxyz_to_matrix(q):
    # scipy wants (x, y, z, w)
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def naive_render(centers, quats, scales, opacity_logits, colors, pose_q, pose_t,
                 fx, fy, cx, cy, roi, z_near=0.05, dilation=0.3):
    """Per-pixel full-sort compositing with no early termination and no culling
    beyond the near plane.

    All inputs are numpy. pose_q/pose_t: camera-to-world (w, x, y, z).
    roi: (x0, y0, w, h). Returns rgb (h, w, 3), depth (h, w), alpha (h, w).
    """
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    x0, y0, w, h = roi

    R_cw = quat_wxyz_to_matrix(pose_q)
    R_wc = R_cw.T
    t_wc = -R_wc @ np.asarray(pose_t, dtype=np.float64)

    cam = centers @ R_wc.T + t_wc
    z = cam[:, 2]
    keep = z > z_near

    opac = 1.0 / (1.0 + np.exp(-np.asarray(opacity_logits, dtype=np.float64)))

    means = np.zeros((n, 2))
    covs = np.zeros((n, 2, 2))
    for i in range(n):
        if not keep[i]:
            continue
        xi, yi, zi = cam[i]
        means[i] = [fx * xi / zi + cx, fy * yi / zi + cy]
        J = np.array([[fx / zi, 0.0, -fx * xi / zi**2],
                      [0.0, fy / zi, -fy * yi / zi**2]])
        qn = np.asarray(quats[i], dtype=np.float64)
        qn = qn / np.linalg.norm(qn)
        Rg = quat_wxyz_to_matrix(qn)
        S = np.diag(np.asarray(scales[i], dtype=np.float64) ** 2)
        sigma_cam = R_wc @ Rg @ S @ Rg.T @ R_wc.T
        covs[i] = J @ sigma_cam @ J.T + dilation * np.eye(2)

    ids = np.arange(n)
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    alpha_img = np.zeros((h, w))
    cols_arr = np.asarray(colors, dtype=np.float64)

    for r in range(h):
        for c in range(w):
            px = np.array([x0 + c, y0 + r], dtype=np.float64)
            # sort this pixel's splats front to back, index breaks depth ties
            order = np.lexsort((ids[keep], z[keep]))
            sel = ids[keep][order]
            trans = 1.0
            for i in sel:
                d = px - means[i]
                cinv = np.linalg.inv(covs[i])
                a = opac[i] * math.exp(-0.5 * float(d @ cinv @ d))
                wgt = a * trans
                rgb[r, c] += wgt * cols_arr[i]
                depth[r, c] += wgt * z[i]
                alpha_img[r, c] += wgt
                trans *= 1.0 - a
    return rgb, depth, alpha_img


def random_scene(rng, n_max=100, size=32):
    """A random splat scene inside the frustum of a size x size camera."""
    n = int(rng.integers(1, n_max + 1))
    fx = fy = size * 1.25
    cx = cy = (size - 1) / 2.0
    z = rng.uniform(0.5, 4.0, size=n)
    half = (size / 2.0) / fx
    x = rng.uniform(-half, half, size=n) * z
    y = rng.uniform(-half, half, size=n) * z
    centers = np.stack([x, y, z], axis=-1)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=-1, keepdims=True)
    scales = np.exp(rng.uniform(math.log(0.01), math.log(0.12), size=(n, 3)))
    logits = rng.uniform(-3.0, 3.0, size=n)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    return dict(centers=centers, quats=quats, scales=scales,
                opacity_logits=logits, colors=colors,
                fx=fx, fy=fy, cx=cx, cy=cy, size=size)


def oracle_ssim(a, b, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Loop-based windowed SSIM map over (H, W, C) images, zero padded."""
    h, w, c = a.shape
    half = window // 2
    xs = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-0.5 * (xs / sigma) ** 2)
    ker = np.outer(g, g)
    ker /= ker.sum()
    out = np.zeros((h, w, c))
    pa = np.zeros((h + 2 * half, w + 2 * half, c))
    pa[half:half + h, half:half + w] = a
    pb = np.zeros_like(pa)
    pb[half:half + h, half:half + w] = b
    for i in range(h):
        for j in range(w):
            wa = pa[i:i + window, j:j + window]
            wb = pb[i:i + window, j:j + window]
            for ch in range(c):
                mu_a = (ker * wa[:, :, ch]).sum()
                mu_b = (ker * wb[:, :, ch]).sum()
                va = (ker * wa[:, :, ch] ** 2).sum() - mu_a**2
                vb = (ker * wb[:, :, ch] ** 2).sum() - mu_b**2
                cov = (ker * wa[:, :, ch] * wb[:, :, ch]).sum() - mu_a * mu_b
                out[i, j, ch] = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                    (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
                )
    return out


def oracle_aligned_rmse(est, ref):
    """RMSE (same units as input) after closed-form rigid alignment of est
    onto ref, written straight from the orthogonal-Procrustes construction."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    cov = (ref - mu_r).T @ (est - mu_e) / len(est)
    u, _, vt = np.linalg.svd(cov)
    s = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    rot = u @ s @ vt
    aligned = (rot @ (est - mu_e).T).T + mu_r
    return float(np.sqrt(np.mean(np.sum((aligned - ref) ** 2, axis=1))))


def finite_difference_gradient(f, x0, h=1e-4):
    """Central differences of a scalar function over a flat float64 array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gf[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * h)
    return g


def grad_close(analytic, numeric, rel=1e-3, floor=1e-9) -> bool:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return bool(np.all(np.abs(a - b) <= rel * np.maximum(np.abs(a), np.abs(b)) + floor))
