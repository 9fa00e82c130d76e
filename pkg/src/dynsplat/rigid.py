"""Per-item mapping and tracking of rigid moving objects.

Each segmented rigid item owns a Gaussian set held in world coordinates at
its latest optimized time.  Tracking advances the set with a per-step rigid
motion: a coarse estimate from flow-matched 3D point pairs, then a joint
appearance refinement of the motion tangent and the shared attributes.
Newly revealed surface regions spawn additional Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .fit import (
    DEFAULT_LRS,
    Adam,
    FitView,
    LossWeights,
    fit_gaussians,
    mask_roi,
    patch_objective,
    pull_gradients,
)
from .frames import Frame, erode_mask, new_observation_mask
from .gaussians import GaussianSet
from .geometry import CameraPose, Intrinsics, RigidTransform, se3_exp
from .registration import DegenerateGeometryError, robust_kabsch
from .renderer import RenderConfig, render
from .torchmath import quat_multiply_t, quat_normalize_t, to_tensor

MIN_INIT_PIXELS = 50
SUBSAMPLE_ABOVE = 5000
DEFAULT_INIT_ITERS = 100
DEFAULT_REFINE_ITERS = 50
DIVERGENCE_STREAK = 10
MOTION_LR = 2e-3

ATTRIBUTE_NAMES = ("rotations", "scales", "opacity_logits", "colors")


class InsufficientObservationError(RuntimeError):
    """Raised when an entity has too few valid pixels to build a model."""


class DegenerateMotionError(RuntimeError):
    """Raised when flow correspondences cannot pin down a rigid motion."""


@dataclass
class RigidItemMap:
    """World-frame Gaussian model of one rigid item plus its motion history."""

    id: int
    gaussians: GaussianSet
    anchor_time: float
    motion_track: list[tuple[float, RigidTransform]] = field(default_factory=list)

    def record_motion(self, timestamp: float, motion: RigidTransform) -> None:
        if self.motion_track and timestamp <= self.motion_track[-1][0]:
            raise ValueError("motion track timestamps must strictly increase")
        self.motion_track.append((timestamp, motion))

    def last_motion(self) -> RigidTransform | None:
        return self.motion_track[-1][1] if self.motion_track else None

    def cumulative(self) -> RigidTransform:
        total = RigidTransform.identity()
        for _, step in self.motion_track:
            total = step.compose(total)
        return total

    def write_track(self, path) -> None:
        """Structured text: per-step motion followed by the running product.

        Columns: time, step translation + quaternion (x y z w), cumulative
        translation + quaternion (x y z w).
        """
        total = RigidTransform.identity()
        with open(path, "w") as f:
            f.write(f"# item {self.id}\n")
            f.write("# time dtx dty dtz dqx dqy dqz dqw ctx cty ctz cqx cqy cqz cqw\n")
            for ts, step in self.motion_track:
                total = step.compose(total)
                cells = [f"{ts:.9f}"]
                for tf in (step, total):
                    cells += [f"{v:.12f}" for v in tf.t]
                    cells += [f"{v:.12f}" for v in (tf.q[1], tf.q[2], tf.q[3], tf.q[0])]
                f.write(" ".join(cells) + "\n")


def read_track(path) -> list[tuple[float, RigidTransform, RigidTransform]]:
    """Parse a track file back into (time, step, cumulative) rows."""
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 15:
                raise ValueError(f"malformed track row: {line!r}")
            ts = vals[0]
            step = RigidTransform([vals[7], vals[4], vals[5], vals[6]], vals[1:4])
            cum = RigidTransform([vals[14], vals[11], vals[12], vals[13]], vals[8:11])
            rows.append((ts, step, cum))
    return rows


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------


def _stride_subsample(ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keep = (ys % 2 == 0) & (xs % 2 == 0)
    return ys[keep], xs[keep]


def neighbor_scales(points: np.ndarray, fallback: float = 0.01) -> np.ndarray:
    """Per-point isotropic scale: median distance to the 3 nearest others."""
    n = points.shape[0]
    if n < 2:
        return np.full(n, fallback)
    k = min(4, n)
    dists, _ = cKDTree(points).query(points, k=k)
    return np.median(dists[:, 1:], axis=1)


def seed_gaussians_from_pixels(frame: Frame, mask: np.ndarray, pose: CameraPose,
                               K: Intrinsics) -> GaussianSet:
    """Back-project masked valid-depth pixels into world-frame Gaussians.

    Above the pixel cap only every other row and column seeds a Gaussian.
    Colors copy the pixel, orientation starts at identity, opacity at 0.5
    pre-activation, and scales follow the local sample spacing.
    """
    valid = np.asarray(mask, bool) & (frame.depth > 0)
    ys, xs = np.nonzero(valid)
    if ys.size > SUBSAMPLE_ABOVE:
        ys, xs = _stride_subsample(ys, xs)
    if ys.size == 0:
        return GaussianSet.empty()
    z = frame.depth[ys, xs]
    cam = np.stack([(xs - K.cx) / K.fx * z, (ys - K.cy) / K.fy * z, z], axis=-1)
    world = pose.apply(cam)
    colors = frame.rgb[ys, xs]
    return GaussianSet.from_points(world, colors, neighbor_scales(world))


def init_item(frame: Frame, pose: CameraPose, K: Intrinsics, entity_id: int,
              n_iters: int = DEFAULT_INIT_ITERS,
              weights: LossWeights | None = None,
              lrs: dict | None = None,
              render_config: RenderConfig | None = None) -> RigidItemMap:
    """Build a fresh item model from one segmented RGB-D view.

    Seeds one Gaussian per sampled entity pixel, then fits the non-center
    attributes against the observed patch for a fixed budget.
    """
    mask = frame.entity_mask(entity_id) & (frame.depth > 0)
    n_valid = int(np.count_nonzero(mask))
    if n_valid < MIN_INIT_PIXELS:
        raise InsufficientObservationError(
            f"insufficient observation: entity {entity_id} has {n_valid} valid "
            f"pixels, needs {MIN_INIT_PIXELS}"
        )
    gaussians = seed_gaussians_from_pixels(frame, mask, pose, K)
    if n_iters > 0:
        view = FitView(frame.rgb, frame.depth, mask, pose,
                       roi=mask_roi(mask, shape=(frame.height, frame.width)))
        fit_gaussians(gaussians, [view], K, n_iters, train=ATTRIBUTE_NAMES,
                      lrs=lrs, weights=weights, render_config=render_config)
    return RigidItemMap(id=entity_id, gaussians=gaussians, anchor_time=frame.timestamp)


# ---------------------------------------------------------------------------
# coarse motion
# ---------------------------------------------------------------------------


def _bilinear_depth(depth: np.ndarray, valid: np.ndarray, u: np.ndarray,
                    v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample depth at subpixel positions; ok only where all corners valid.

    Interpolates inverse depth: for a planar surface 1/z is affine in image
    coordinates, so this is exact on planes where direct bilinear depth
    overshoots on their convex perspective profile.
    """
    h, w = depth.shape
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    inside = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= w - 1) & (y0 + 1 <= h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    fx = u - x0c
    fy = v - y0c
    corners_ok = (valid[y0c, x0c] & valid[y0c, x0c + 1]
                  & valid[y0c + 1, x0c] & valid[y0c + 1, x0c + 1])
    inv = np.zeros_like(depth)
    np.divide(1.0, depth, out=inv, where=depth > 0)
    w_interp = ((1 - fy) * ((1 - fx) * inv[y0c, x0c] + fx * inv[y0c, x0c + 1])
                + fy * ((1 - fx) * inv[y0c + 1, x0c] + fx * inv[y0c + 1, x0c + 1]))
    ok = inside & corners_ok & (w_interp > 0)
    z = 1.0 / np.where(w_interp > 0, w_interp, 1.0)
    return z, ok


def estimate_coarse_motion(prev: Frame, nxt: Frame, pose_prev: CameraPose,
                           pose_next: CameraPose, K: Intrinsics,
                           entity_id: int) -> RigidTransform:
    """World-frame rigid step of an item between two consecutive frames.

    Flow-matched pixels inside the entity mask in both frames become 3D-3D
    pairs through their depths and camera poses; displacement outliers beyond
    3x the median absolute deviation are dropped before the closed-form
    least-squares alignment.
    """
    if prev.flow_to_next is None:
        raise DegenerateMotionError("degenerate motion: no flow on the source frame")
    flow = prev.flow_to_next
    m_prev = prev.entity_mask(entity_id) & (prev.depth > 0) & flow.valid
    ys, xs = np.nonzero(m_prev)
    if ys.size == 0:
        raise DegenerateMotionError("degenerate motion: no flow-valid entity pixels")

    u2 = xs + flow.du[ys, xs]
    v2 = ys + flow.dv[ys, xs]
    # Every corner of the interpolation stencil must lie on the entity with
    # valid depth, otherwise background depth bleeds into rim targets.
    target_ok = nxt.entity_mask(entity_id) & (nxt.depth > 0)
    z2, ok = _bilinear_depth(nxt.depth, target_ok, u2, v2)
    if int(ok.sum()) < 3:
        raise DegenerateMotionError(
            f"degenerate motion: {int(ok.sum())} correspondences for entity {entity_id}"
        )

    ys, xs, u2, v2, z2 = ys[ok], xs[ok], u2[ok], v2[ok], z2[ok]
    z1 = prev.depth[ys, xs]
    cam1 = np.stack([(xs - K.cx) / K.fx * z1, (ys - K.cy) / K.fy * z1, z1], axis=-1)
    cam2 = np.stack([(u2 - K.cx) / K.fx * z2, (v2 - K.cy) / K.fy * z2, z2], axis=-1)
    try:
        motion, _ = robust_kabsch(pose_prev.apply(cam1), pose_next.apply(cam2))
    except DegenerateGeometryError as exc:
        raise DegenerateMotionError(f"degenerate motion: {exc}") from exc
    return motion


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    motion: RigidTransform
    losses: list[float]
    reverted: bool


def _chain_rotation_grad(rotations: torch.Tensor, q_step: torch.Tensor,
                         upstream: torch.Tensor) -> torch.Tensor:
    """Pull a gradient on transported orientations back to the stored ones."""
    leaf = rotations.detach().clone().requires_grad_(True)
    moved = quat_multiply_t(q_step.unsqueeze(0).expand(leaf.shape[0], 4),
                            quat_normalize_t(leaf))
    (moved * upstream).sum().backward()
    return leaf.grad


def refine_motion(item: RigidItemMap, initial_motion: RigidTransform,
                  frame_t: Frame, frame_t1: Frame,
                  pose_t: CameraPose, pose_t1: CameraPose, K: Intrinsics,
                  n_iters: int = DEFAULT_REFINE_ITERS,
                  lrs: dict | None = None,
                  weights: LossWeights | None = None,
                  render_config: RenderConfig | None = None,
                  advance: bool = True,
                  rim_erosion: int = 1) -> RefineResult:
    """Jointly polish the item's step motion and its shared attributes.

    Every iteration renders the transported model against the later frame
    (driving the 6-vector motion tangent) and the untransported model against
    the earlier frame, so color, opacity, orientation and scale answer to
    both views while centers at the earlier time never move.  The loss masks
    shrink by rim_erosion pixels so half-covered silhouette pixels cannot
    drag the alignment.  A loss that rises for 10 straight iterations reverts
    motion and attributes.  When advance is set the item state is transported
    to the later frame and the step is recorded.
    """
    weights = weights or LossWeights()
    rates = {**DEFAULT_LRS, "motion": MOTION_LR, **(lrs or {})}
    adam = Adam(rates)

    mask_t = erode_mask(frame_t.entity_mask(item.id) & (frame_t.depth > 0), rim_erosion)
    mask_t1 = erode_mask(frame_t1.entity_mask(item.id) & (frame_t1.depth > 0), rim_erosion)
    view_t = FitView(frame_t.rgb, frame_t.depth, mask_t, pose_t,
                     roi=mask_roi(mask_t, shape=(frame_t.height, frame_t.width)))
    view_t1 = FitView(frame_t1.rgb, frame_t1.depth, mask_t1, pose_t1,
                      roi=mask_roi(mask_t1, shape=(frame_t1.height, frame_t1.width)))

    snapshot = {a: getattr(item.gaussians, a).detach().clone() for a in ATTRIBUTE_NAMES}
    motion = RigidTransform(initial_motion.q, initial_motion.t)
    losses: list[float] = []
    reverted = False
    prev_loss = None
    streak = 0

    for _ in range(n_iters):
        q_step = to_tensor(motion.q)
        moved = item.gaussians.clone()
        moved.transform_(motion)

        total = {a: None for a in ATTRIBUTE_NAMES}
        motion_grad = None
        loss_value = 0.0

        patch1 = render(moved, pose_t1, K, view_t1.roi, save_graph=True,
                        config=render_config)
        loss1, n1 = patch_objective(patch1, view_t1, weights)
        if loss1 is not None:
            g1 = pull_gradients(patch1, loss1)
            loss_value += float(loss1)
            motion_grad = -g1.pose_tangent
            total["rotations"] = _chain_rotation_grad(
                item.gaussians.rotations, q_step, g1.rotations)
            for a in ("scales", "opacity_logits", "colors"):
                total[a] = getattr(g1, a)

        patch0 = render(item.gaussians, pose_t, K, view_t.roi, save_graph=True,
                        config=render_config)
        loss0, n0 = patch_objective(patch0, view_t, weights)
        if loss0 is not None:
            g0 = pull_gradients(patch0, loss0)
            loss_value += float(loss0)
            for a in ATTRIBUTE_NAMES:
                g = getattr(g0, a)
                total[a] = g if total[a] is None else total[a] + g

        losses.append(loss_value)
        if prev_loss is not None and loss_value > prev_loss:
            streak += 1
            if streak >= DIVERGENCE_STREAK:
                motion = RigidTransform(initial_motion.q, initial_motion.t)
                with torch.no_grad():
                    for a, saved in snapshot.items():
                        setattr(item.gaussians, a, saved.clone())
                reverted = True
                break
        else:
            streak = 0
        prev_loss = loss_value

        with torch.no_grad():
            if motion_grad is not None:
                step = adam.step("motion", motion_grad)
                motion = se3_exp(step.numpy()).compose(motion)
            for a in ATTRIBUTE_NAMES:
                if total[a] is not None:
                    getattr(item.gaussians, a).add_(adam.step(a, total[a]))
        item.gaussians.apply_constraints()

    if advance:
        item.gaussians.transform_(motion)
        item.anchor_time = frame_t1.timestamp
        item.record_motion(frame_t1.timestamp, motion)
    return RefineResult(motion=motion, losses=losses, reverted=reverted)


# ---------------------------------------------------------------------------
# growth
# ---------------------------------------------------------------------------


def add_gaussians(item: RigidItemMap, frame: Frame, pose: CameraPose,
                  K: Intrinsics, n_iters: int = DEFAULT_INIT_ITERS,
                  alpha_threshold: float = 0.5, opening_radius: int = 1,
                  weights: LossWeights | None = None,
                  lrs: dict | None = None,
                  render_config: RenderConfig | None = None) -> int:
    """Spawn Gaussians for entity pixels the current model leaves uncovered.

    Renders the item alone to find low-opacity entity pixels, seeds there the
    same way initialization does, fits only the new rows against the current
    view, and appends.  Returns how many Gaussians were added.
    """
    entity = frame.entity_mask(item.id) & (frame.depth > 0)
    if not entity.any():
        return 0
    roi = mask_roi(entity, shape=(frame.height, frame.width))
    patch = render(item.gaussians, pose, K, roi, config=render_config)
    alpha = np.zeros((frame.height, frame.width))
    x0, y0, w, h = patch.roi
    alpha[y0:y0 + h, x0:x0 + w] = patch.alpha.detach().numpy()

    fresh = new_observation_mask(entity, alpha, alpha_threshold, opening_radius)
    if not fresh.any():
        return 0
    new_set = seed_gaussians_from_pixels(frame, fresh, pose, K)
    if len(new_set) == 0:
        return 0

    n_old = len(item.gaussians)
    item.gaussians.append(new_set)
    if n_iters > 0:
        view = FitView(frame.rgb, frame.depth, entity, pose, roi=roi)
        fit_gaussians(item.gaussians, [view], K, n_iters, train=ATTRIBUTE_NAMES,
                      lrs=lrs, weights=weights,
                      rows=np.arange(n_old, len(item.gaussians)),
                      render_config=render_config)
    return len(new_set)
