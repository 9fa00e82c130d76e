"""Trajectory accuracy and rendering quality metrics, plus report output.

Position tracks are associated by timestamp, optionally aligned by a
closed-form rigid fit, and compared in centimeters. Image metrics follow the
standard masked PSNR/SSIM definitions on unit-range images.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .frames import Trajectory
from .losses import ssim_map
from .registration import DegenerateGeometryError, kabsch
from .torchmath import DTYPE

ASSOCIATION_TOLERANCE = 0.02
PSNR_CAP = 100.0
M_TO_CM = 100.0


@dataclass
class AteResult:
    """Absolute trajectory error over the associated poses, in centimeters."""

    rmse_cm: float
    sd_cm: float
    residuals_cm: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.residuals_cm)


def _track_points(traj) -> tuple[np.ndarray, np.ndarray]:
    """(timestamps, positions) arrays from a Trajectory or (ts, point) pairs.

    A point entry may be a bare 3-vector or anything carrying a .t position
    attribute, so camera tracks and root tracks both load unchanged.
    """
    if isinstance(traj, Trajectory):
        return np.asarray(traj.timestamps, dtype=np.float64), traj.positions()
    stamps: list[float] = []
    points: list[np.ndarray] = []
    for ts, entry in traj:
        stamps.append(float(ts))
        points.append(np.asarray(getattr(entry, "t", entry), dtype=np.float64))
    return np.asarray(stamps), np.asarray(points).reshape(len(points), 3)


def associate(ts_a, ts_b, tolerance: float = ASSOCIATION_TOLERANCE) -> list[tuple[int, int]]:
    """Index pairs (i, j) matching each stamp in ts_a to its nearest stamp in
    ts_b within the tolerance; every stamp is used at most once and a contested
    ts_b stamp goes to the closest claimant."""
    ts_a = np.asarray(ts_a, dtype=np.float64)
    ts_b = np.asarray(ts_b, dtype=np.float64)
    if ts_a.size == 0 or ts_b.size == 0:
        return []
    order = np.argsort(ts_b, kind="stable")
    sorted_b = ts_b[order]
    right = np.searchsorted(sorted_b, ts_a)
    best = np.zeros(ts_a.size, dtype=int)
    dist = np.full(ts_a.size, np.inf)
    for cand in (np.clip(right - 1, 0, sorted_b.size - 1),
                 np.clip(right, 0, sorted_b.size - 1)):
        d = np.abs(sorted_b[cand] - ts_a)
        closer = d < dist
        best[closer] = cand[closer]
        dist[closer] = d[closer]
    claims: dict[int, int] = {}
    for i in np.nonzero(dist <= tolerance)[0]:
        j = int(best[i])
        if j not in claims or dist[i] < dist[claims[j]]:
            claims[j] = int(i)
    return sorted((i, int(order[j])) for j, i in claims.items())


def _align_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """src mapped onto dst by the best rigid motion; a track too degenerate to
    pin down a rotation (a stationary or straight-line path) falls back to
    matching centroids, which is the part the data does constrain."""
    try:
        return kabsch(src, dst).apply(src)
    except DegenerateGeometryError:
        return src - src.mean(axis=0) + dst.mean(axis=0)


def ate(estimated, reference, align: bool = True,
        tolerance: float = ASSOCIATION_TOLERANCE) -> AteResult:
    """Absolute trajectory error of estimated against reference positions.

    Associates poses by timestamp, optionally rigidly aligns the estimated
    positions to the reference, and reports the RMSE and standard deviation
    of the residual norms in centimeters. Raises ValueError when fewer than
    3 pose pairs associate.
    """
    ts_est, pts_est = _track_points(estimated)
    ts_ref, pts_ref = _track_points(reference)
    pairs = associate(ts_est, ts_ref, tolerance)
    if len(pairs) < 3:
        raise ValueError(
            f"trajectory error needs at least 3 associated poses, got {len(pairs)}")
    est = pts_est[[i for i, _ in pairs]]
    ref = pts_ref[[j for _, j in pairs]]
    if align:
        est = _align_points(est, ref)
    residuals = np.linalg.norm(est - ref, axis=1) * M_TO_CM
    rmse = float(np.sqrt(np.mean(residuals**2)))
    return AteResult(rmse, float(np.std(residuals)), residuals,
                     np.asarray([ts_ref[j] for _, j in pairs]))


def write_residual_csv(result: AteResult, path) -> None:
    """Per-pose residual norms against reference timestamps, for plotting."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", "residual_cm"])
        for ts, r in zip(result.timestamps, result.residuals_cm):
            writer.writerow([f"{ts:.6f}", f"{r:.6f}"])


def render_metrics(rendered, observed, mask=None) -> tuple[float, float]:
    """(PSNR dB, mean SSIM) of a rendered unit-range image against the
    observed one, over the masked pixels (everywhere when mask is None).

    PSNR uses peak 1.0 and is capped at 100 dB so identical images report a
    finite number. SSIM zeroes the pixels outside the mask in both images
    before windowing, then averages the per-pixel map inside the mask.
    """
    r = np.asarray(rendered, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if r.shape != o.shape or r.ndim != 3:
        raise ValueError("images must share an (H, W, C) shape")
    if mask is None:
        m = np.ones(r.shape[:2], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("render metrics over an empty mask")

    mse = float(np.mean((r[m] - o[m]) ** 2))
    psnr = PSNR_CAP if mse <= 0 else min(PSNR_CAP, -10.0 * math.log10(mse))

    mf = torch.as_tensor(m, dtype=DTYPE).unsqueeze(-1)
    rt = torch.as_tensor(r, dtype=DTYPE) * mf
    ot = torch.as_tensor(o, dtype=DTYPE) * mf
    smap = ssim_map(rt, ot)
    ssim = float(smap.mul(mf).sum() / (r.shape[2] * n))
    return psnr, ssim


@dataclass
class SequenceMetrics:
    """Everything the report prints about one processed sequence."""

    name: str
    trajectories: dict[str, AteResult] = field(default_factory=dict)
    psnr_db: float | None = None
    ssim: float | None = None
    timings_s: dict[str, float] = field(default_factory=dict)

    def add_trajectory(self, label: str, result: AteResult) -> None:
        self.trajectories[label] = result


def format_report(sequences: list[SequenceMetrics],
                  title: str = "trajectory and rendering metrics") -> str:
    """Structured plain-text report over per-sequence metric blocks."""
    lines = [title, "=" * len(title), ""]
    for seq in sequences:
        lines.append(seq.name)
        lines.append("-" * len(seq.name))
        for label, res in seq.trajectories.items():
            lines.append(
                f"  ate[{label}]: rmse {res.rmse_cm:.3f} cm"
                f"  sd {res.sd_cm:.3f} cm  poses {len(res)}")
        if seq.psnr_db is not None:
            lines.append(f"  psnr: {seq.psnr_db:.2f} dB")
        if seq.ssim is not None:
            lines.append(f"  ssim: {seq.ssim:.4f}")
        for stage, seconds in seq.timings_s.items():
            lines.append(f"  time[{stage}]: {seconds:.3f} s")
        lines.append("")
    return "\n".join(lines)


def write_report(sequences: list[SequenceMetrics], path, **kwargs) -> None:
    with open(path, "w") as f:
        f.write(format_report(sequences, **kwargs))
