"""Articulated-figure mapping: skeleton-anchored Gaussians plus a motion net.

A figure's Gaussians live in a canonical skeleton frame. Initialization
resolves the observation's unknown global scale from one depth sample at the
root joint, attaches a Gaussian to every capsule-surface anchor, and fits
appearance against the first frame. Each later frame pair deforms the set
with the pose-conditioned net, transports it through an optimized root
transform, and trains net, root and shared attributes against both frames at
once. The Gaussian count never changes after initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .deformation import DeformationNet, deform_tensors, flatten_variation
from .fit import DEFAULT_LRS, FitView, LossWeights, mask_roi, patch_objective, pull_gradients
from .frames import Frame, Trajectory, erode_mask
from .gaussians import SCALE_FLOOR, GaussianSet
from .geometry import CameraPose, Intrinsics, RigidTransform
from .losses import SCALE_REG_WEIGHT, scale_regularizer
from .renderer import RenderConfig, render
from .skeleton import BONE_RADIUS, build_anchor_table, anchors_in_skeleton_frame, pose_variation
from .torchmath import (
    DTYPE,
    compose_qt,
    pose_tensors,
    quat_multiply_t,
    rigid_from_tensors,
    se3_exp_t,
    to_tensor,
    transform_points_t,
)

ROOT_WINDOW = 2              # half-width of the root depth median window
DEFAULT_INIT_ITERS = 150
DEFAULT_UPDATE_ITERS = 100
NET_LR = 1e-3
ROOT_LR = 2e-3
RIM_EROSION = 1
# The depth sample at the root pixel lies on the body surface, roughly one
# torso-capsule radius in front of the root joint along the viewing ray.
ROOT_SURFACE_OFFSET = BONE_RADIUS[3]


class RootDepthError(RuntimeError):
    """The depth window around the root pixel holds no valid sample."""


@dataclass
class HumanUpdateResult:
    observed: bool
    losses: list[float] = field(default_factory=list)
    root_world: RigidTransform | None = None


@dataclass
class HumanMap:
    """State of one tracked figure.

    gaussians holds the canonical (skeleton-frame) set for the most recent
    anchor time; root_track's transforms map that frame into the world.
    anchor_scale is frozen at initialization and feeds the scale regularizer.
    """

    id: int
    gaussians: GaussianSet
    net: DeformationNet
    anchor_scale: float
    ratio: float
    anchor_time: float
    root_track: list[tuple[float, RigidTransform]] = field(default_factory=list)

    def last_root(self) -> RigidTransform:
        return self.root_track[-1][1]

    def record_root(self, ts: float, root: RigidTransform) -> None:
        if self.root_track and ts <= self.root_track[-1][0]:
            raise ValueError(
                f"root timestamps must increase: {ts} after {self.root_track[-1][0]}")
        self.root_track.append((float(ts), root))

    def root_trajectory(self) -> Trajectory:
        """Root path in the camera-track file format, for trajectory metrics."""
        out = Trajectory()
        for ts, root in self.root_track:
            out.append(ts, CameraPose(root.q, root.t))
        return out


def root_from_depth(frame: Frame, root_pixel, K: Intrinsics) -> np.ndarray:
    """Back-project a root pixel through the median depth of its 5x5 window."""
    u, v = float(root_pixel[0]), float(root_pixel[1])
    ui, vi = int(round(u)), int(round(v))
    y0, y1 = max(vi - ROOT_WINDOW, 0), min(vi + ROOT_WINDOW + 1, frame.height)
    x0, x1 = max(ui - ROOT_WINDOW, 0), min(ui + ROOT_WINDOW + 1, frame.width)
    window = frame.depth[y0:y1, x0:x1] if y1 > y0 and x1 > x0 else np.zeros((0,))
    depths = window[window > 0]
    if depths.size == 0:
        raise RootDepthError("root depth unavailable")
    z = float(np.median(depths))
    return np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])


def init_human(frame: Frame, pose: CameraPose, K: Intrinsics, entity_id: int,
               n_iters: int = DEFAULT_INIT_ITERS, seed: int = 0,
               weights: LossWeights | None = None, lrs: dict | None = None,
               render_config: RenderConfig | None = None,
               rim_erosion: int = RIM_EROSION) -> HumanMap:
    """Instantiate and appearance-fit a figure from its first observation.

    The observation's root translation carries no metric scale; the depth
    image supplies it, and the recovered ratio rescales the skeleton and the
    anchor sweep before the Gaussians are attached. The depth sample sits on
    the body surface rather than at the root joint, so the root position is
    optimized together with the appearance attributes instead of being kept
    at its back-projected start. The observed root rotation is kept as is;
    appearance has nothing to add to it here.
    """
    obs = frame.skeletons.get(entity_id)
    if obs is None:
        raise ValueError(f"frame carries no skeleton for entity {entity_id}")
    r1 = root_from_depth(frame, obs.root_pixel, K)
    obs_norm = float(np.linalg.norm(obs.pose.root.t))
    if obs_norm <= 0:
        raise ValueError("observed root translation is zero; scale unresolvable")
    ratio = float(np.linalg.norm(r1)) / obs_norm

    scaled_pose = obs.pose.rescaled(ratio)
    table = build_anchor_table(scale=ratio)
    centers, rotations = anchors_in_skeleton_frame(table, scaled_pose)
    rng = np.random.default_rng(seed)
    n = len(table)
    gaussians = GaussianSet(
        centers, rotations,
        np.repeat(table.spacing[:, None], 3, axis=1),
        rng.uniform(-1.0, 1.0, size=n),
        rng.uniform(0.0, 1.0, size=(n, 3)),
    )

    # start the root one scaled torso radius behind the surface sample
    push = 1.0 + ROOT_SURFACE_OFFSET * ratio / float(np.linalg.norm(r1))
    root_cam = RigidTransform(obs.pose.root.q, r1 * push)
    view = _loss_view(frame, entity_id, pose, rim_erosion)
    if view is not None and n_iters > 0:
        weights = weights or LossWeights()
        rates = dict(DEFAULT_LRS, **(lrs or {}))
        q_r0, t_r0 = pose_tensors(root_cam)
        q_T, t_T = pose_tensors(pose)
        centers_c = gaussians.centers.detach().clone()
        rot_leaf = gaussians.rotations.detach().clone().requires_grad_(True)
        scl_leaf = gaussians.scales.detach().clone().requires_grad_(True)
        op_leaf = gaussians.opacity_logits.detach().clone().requires_grad_(True)
        col_leaf = gaussians.colors.detach().clone().requires_grad_(True)
        delta = torch.zeros(3, dtype=DTYPE, requires_grad=True)
        opt = torch.optim.Adam([
            {"params": [delta], "lr": ROOT_LR},
            {"params": [rot_leaf], "lr": rates["rotations"]},
            {"params": [scl_leaf], "lr": rates["scales"]},
            {"params": [op_leaf], "lr": rates["opacity_logits"]},
            {"params": [col_leaf], "lr": rates["colors"]},
        ])
        zeros3 = torch.zeros(3, dtype=DTYPE)
        for _ in range(n_iters):
            opt.zero_grad()
            dq, dt = se3_exp_t(torch.cat([zeros3, delta]))
            q_root, t_root = compose_qt(dq, dt, q_r0, t_r0)
            q_w, t_w = compose_qt(q_T, t_T, q_root, t_root)
            c_w = transform_points_t(q_w, t_w, centers_c)
            r_w = quat_multiply_t(q_w.unsqueeze(0).expand(n, 4), rot_leaf)
            v = gaussians.view(centers=c_w, rotations=r_w, scales=scl_leaf,
                               opacity_logits=op_leaf, colors=col_leaf)
            patch = render(v, pose, K, view.roi, save_graph=True,
                           config=render_config)
            loss, _ = patch_objective(patch, view, weights)
            if loss is None:
                break
            g = pull_gradients(patch, loss)
            torch.autograd.backward([c_w, r_w], [g.centers, g.rotations])
            for leaf, grad in ((scl_leaf, g.scales), (op_leaf, g.opacity_logits),
                               (col_leaf, g.colors)):
                if leaf.grad is None:
                    leaf.grad = grad.clone()
                else:
                    leaf.grad += grad
            opt.step()
            with torch.no_grad():
                scl_leaf.clamp_(min=SCALE_FLOOR)
                col_leaf.clamp_(0.0, 1.0)
        with torch.no_grad():
            dq, dt = se3_exp_t(torch.cat([zeros3, delta]))
            q_root, t_root = compose_qt(dq, dt, q_r0, t_r0)
            root_cam = rigid_from_tensors(q_root, t_root)
        gaussians = GaussianSet(centers_c, rot_leaf.detach(), scl_leaf.detach(),
                                op_leaf.detach(), col_leaf.detach())

    world_root = RigidTransform(pose.q, pose.t).compose(root_cam)
    return HumanMap(
        id=entity_id,
        gaussians=gaussians,
        net=DeformationNet(seed=seed),
        anchor_scale=float(gaussians.scales.mean()),
        ratio=ratio,
        anchor_time=frame.timestamp,
        root_track=[(float(frame.timestamp), world_root)],
    )


def _loss_view(frame: Frame, entity_id: int, pose: CameraPose,
               rim_erosion: int = RIM_EROSION) -> FitView | None:
    mask = erode_mask(frame.entity_mask(entity_id) & (frame.depth > 0), rim_erosion)
    if not mask.any():
        return None
    return FitView(frame.rgb, frame.depth, mask, pose,
                   roi=mask_roi(mask, shape=(frame.height, frame.width)))


def update_human(map: HumanMap, frame_t: Frame, frame_t1: Frame,
                 pose_t: CameraPose, pose_t1: CameraPose, K: Intrinsics,
                 n_iters: int = DEFAULT_UPDATE_ITERS,
                 lambda_scale: float = SCALE_REG_WEIGHT,
                 weights: LossWeights | None = None,
                 lrs: dict | None = None,
                 render_config: RenderConfig | None = None,
                 rim_erosion: int = RIM_EROSION) -> HumanUpdateResult:
    """Advance a figure across one frame pair.

    The pose change between the two skeleton observations drives the
    deformation net; the root transform into the later camera starts from the
    previous optimized root advanced by the observed root step, and is
    optimized jointly with the net and the shared appearance attributes,
    under both frames' losses and the scale regularizer. Without both
    observations, or without any usable figure pixels, the map is carried
    forward unchanged.
    """
    obs0 = frame_t.skeletons.get(map.id)
    obs1 = frame_t1.skeletons.get(map.id)
    if obs0 is None or obs1 is None:
        return HumanUpdateResult(observed=False)
    view1 = _loss_view(frame_t1, map.id, pose_t1, rim_erosion)
    view0 = _loss_view(frame_t, map.id, pose_t, rim_erosion)
    if view1 is None and view0 is None:
        return HumanUpdateResult(observed=False)

    weights = weights or LossWeights()
    rates = dict(DEFAULT_LRS, **(lrs or {}))
    flat = flatten_variation(pose_variation(
        obs0.pose.rescaled(map.ratio), obs1.pose.rescaled(map.ratio)))

    # advance the previous optimized root by the observed world-frame step
    w_obs0 = RigidTransform(pose_t.q, pose_t.t).compose(
        RigidTransform(obs0.pose.root.q, obs0.pose.root.t * map.ratio))
    w_obs1 = RigidTransform(pose_t1.q, pose_t1.t).compose(
        RigidTransform(obs1.pose.root.q, obs1.pose.root.t * map.ratio))
    obs_step = w_obs1.compose(w_obs0.inverse())
    root_init = RigidTransform(pose_t1.q, pose_t1.t).inverse().compose(
        obs_step.compose(map.last_root()))
    q_ri, t_ri = pose_tensors(root_init)
    q_T1, t_T1 = pose_tensors(pose_t1)

    # the earlier frame renders the canonical state through its frozen root
    w0 = RigidTransform(pose_t.q, pose_t.t).compose(map.last_root())
    q_w0 = to_tensor(w0.q)
    centers0 = to_tensor(w0.apply(map.gaussians.centers.detach().numpy()))

    n = len(map.gaussians)
    centers_c = map.gaussians.centers.detach().clone()
    rot_leaf = map.gaussians.rotations.detach().clone().requires_grad_(True)
    scl_leaf = map.gaussians.scales.detach().clone().requires_grad_(True)
    op_leaf = map.gaussians.opacity_logits.detach().clone().requires_grad_(True)
    col_leaf = map.gaussians.colors.detach().clone().requires_grad_(True)
    delta = torch.zeros(6, dtype=DTYPE, requires_grad=True)

    opt = torch.optim.Adam([
        {"params": list(map.net.parameters()), "lr": NET_LR},
        {"params": [delta], "lr": ROOT_LR},
        {"params": [rot_leaf], "lr": rates["rotations"]},
        {"params": [scl_leaf], "lr": rates["scales"]},
        {"params": [op_leaf], "lr": rates["opacity_logits"]},
        {"params": [col_leaf], "lr": rates["colors"]},
    ])

    history: list[float] = []
    for _ in range(n_iters):
        opt.zero_grad()
        loss_value = 0.0
        graph_tensors: list[torch.Tensor] = []
        graph_grads: list[torch.Tensor] = []
        direct = {scl_leaf: None, op_leaf: None, col_leaf: None}

        c_def, r_def = deform_tensors(map.net, centers_c, rot_leaf, flat)
        dq, dt = se3_exp_t(delta)
        q_root, t_root = compose_qt(dq, dt, q_ri, t_ri)
        q_w1, t_w1 = compose_qt(q_T1, t_T1, q_root, t_root)
        c1 = transform_points_t(q_w1, t_w1, c_def)
        r1 = quat_multiply_t(q_w1.unsqueeze(0).expand(n, 4), r_def)

        if view1 is not None:
            v1 = map.gaussians.view(centers=c1, rotations=r1, scales=scl_leaf,
                                    opacity_logits=op_leaf, colors=col_leaf)
            patch1 = render(v1, pose_t1, K, view1.roi, save_graph=True,
                            config=render_config)
            loss1, _ = patch_objective(patch1, view1, weights)
            if loss1 is not None:
                g1 = pull_gradients(patch1, loss1)
                loss_value += float(loss1)
                graph_tensors += [c1, r1]
                graph_grads += [g1.centers, g1.rotations]
                for leaf, g in ((scl_leaf, g1.scales), (op_leaf, g1.opacity_logits),
                                (col_leaf, g1.colors)):
                    direct[leaf] = g if direct[leaf] is None else direct[leaf] + g

        if view0 is not None:
            r0 = quat_multiply_t(q_w0.unsqueeze(0).expand(n, 4), rot_leaf)
            v0 = map.gaussians.view(centers=centers0, rotations=r0, scales=scl_leaf,
                                    opacity_logits=op_leaf, colors=col_leaf)
            patch0 = render(v0, pose_t, K, view0.roi, save_graph=True,
                            config=render_config)
            loss0, _ = patch_objective(patch0, view0, weights)
            if loss0 is not None:
                g0 = pull_gradients(patch0, loss0)
                loss_value += float(loss0)
                graph_tensors.append(r0)
                graph_grads.append(g0.rotations)
                for leaf, g in ((scl_leaf, g0.scales), (op_leaf, g0.opacity_logits),
                                (col_leaf, g0.colors)):
                    direct[leaf] = g if direct[leaf] is None else direct[leaf] + g

        reg = lambda_scale * scale_regularizer(scl_leaf, map.anchor_scale)
        reg.backward()
        loss_value += float(reg)
        if graph_tensors:
            torch.autograd.backward(graph_tensors, graph_grads)
        for leaf, g in direct.items():
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g.clone()
            else:
                leaf.grad += g

        opt.step()
        with torch.no_grad():
            scl_leaf.clamp_(min=SCALE_FLOOR)
            col_leaf.clamp_(0.0, 1.0)
        history.append(loss_value)

    with torch.no_grad():
        c_def, r_def = deform_tensors(map.net, centers_c, rot_leaf, flat)
        dq, dt = se3_exp_t(delta)
        q_root, t_root = compose_qt(dq, dt, q_ri, t_ri)
        root_cam = rigid_from_tensors(q_root, t_root)
    map.gaussians = GaussianSet(c_def, r_def, scl_leaf.detach(),
                                op_leaf.detach(), col_leaf.detach())
    world_root = RigidTransform(pose_t1.q, pose_t1.t).compose(root_cam)
    map.anchor_time = float(frame_t1.timestamp)
    map.record_root(frame_t1.timestamp, world_root)
    return HumanUpdateResult(observed=True, losses=history, root_world=world_root)
