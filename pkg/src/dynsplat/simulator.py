"""Synthetic scene generator.

Renders scripted scenes by analytic raycasting (textured planes, rigidly
moving textured boxes, capsule-swept articulated figures) and emits the full
observation bundle per frame: color, depth, exact entity segmentation, exact
forward flow from re-projecting each hit point through the scripted motion,
and skeletal estimates for figures. Ground truth stays exact; the configured
noise only perturbs what the tracker is shown.

The ray through pixel (u, v) is parameterized so the ray parameter equals
camera-frame depth, which keeps depth images and flow re-projections free of
interpolation error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frames import EntityInfo, FlowField, Frame, Trajectory
from .geometry import (
    CameraPose,
    Intrinsics,
    RigidTransform,
    project_points,
    quat_rotate,
    quat_to_matrix,
)
from .skeleton import (
    BONE_RADIUS,
    N_JOINTS,
    PARENTS,
    SkeletonObservation,
    SkeletonPose,
    fk,
)

_T_MIN = 0.01  # rays start just in front of the lens


@dataclass
class SurfaceTexture:
    """Smooth multi-sine color field over a 2D surface parameterization."""

    base: np.ndarray     # (3,)
    freq: np.ndarray     # (K, 2) cycles per meter along (u, v)
    phase: np.ndarray    # (K,)
    amp: np.ndarray      # (K, 3)

    @classmethod
    def random(cls, rng, contrast: float = 0.16) -> "SurfaceTexture":
        k = 4
        return cls(
            base=rng.uniform(0.35, 0.65, size=3),
            freq=rng.uniform(0.8, 3.5, size=(k, 2)) * rng.choice([-1, 1], size=(k, 2)),
            phase=rng.uniform(0, 2 * np.pi, size=k),
            amp=rng.uniform(0.3, 1.0, size=(k, 3)) * contrast,
        )

    def evaluate(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        arg = (
            2.0 * np.pi * (np.outer(u, self.freq[:, 0]) + np.outer(v, self.freq[:, 1]))
            + self.phase[None, :]
        )
        col = self.base[None, :] + np.sin(arg) @ self.amp
        return np.clip(col, 0.02, 0.98)


@dataclass
class TexturedPlane:
    point: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    half_u: float
    half_v: float
    texture: SurfaceTexture

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        self.u_axis = np.asarray(self.u_axis, dtype=np.float64)
        self.u_axis = self.u_axis / np.linalg.norm(self.u_axis)
        v = np.asarray(self.v_axis, dtype=np.float64)
        v = v - (v @ self.u_axis) * self.u_axis
        self.v_axis = v / np.linalg.norm(v)
        self.normal = np.cross(self.u_axis, self.v_axis)


@dataclass
class TexturedBox:
    half_sizes: np.ndarray             # (3,) local half extents
    track: list[RigidTransform]        # local-to-world per frame
    texture: SurfaceTexture
    label: int

    def __post_init__(self):
        self.half_sizes = np.asarray(self.half_sizes, dtype=np.float64)


@dataclass
class FigureTrack:
    """Scripted articulated figure at true metric scale."""

    scale: float                        # metric scale of the unit skeleton
    poses: list[SkeletonPose]           # root maps skeleton to world, true scale
    label: int
    palette_seed: int = 0

    def world_bone_transforms(self, i: int) -> list[RigidTransform]:
        glob = fk(self.poses[i])
        root = self.poses[i].root
        return [root.compose(g) for g in glob]


@dataclass
class NoiseModel:
    depth_abs: float = 0.0    # sigma floor, meters
    depth_quad: float = 0.0   # sigma growth, meters per m^2
    rgb: float = 0.0
    flow: float = 0.0

    def depth_sigma(self, z: np.ndarray) -> np.ndarray:
        return self.depth_abs + self.depth_quad * z * z


@dataclass
class SyntheticScene:
    intrinsics: Intrinsics
    camera_track: list[CameraPose]
    planes: list[TexturedPlane] = field(default_factory=list)
    boxes: list[TexturedBox] = field(default_factory=list)
    figures: list[FigureTrack] = field(default_factory=list)
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    fps: float = 30.0


@dataclass
class ExactFrame:
    depth: np.ndarray
    rgb: np.ndarray
    flow: FlowField | None


@dataclass
class SimulationResult:
    frames: list[Frame]
    intrinsics: Intrinsics
    trajectory: Trajectory                       # exact camera track
    item_tracks: dict[int, list[RigidTransform]]
    root_tracks: dict[int, list[RigidTransform]]  # skeleton-to-world, true scale
    figure_scales: dict[int, float]
    exact: list[ExactFrame]
    scene: SyntheticScene


# ---------------------------------------------------------------------------
# ray / primitive intersections (vectorized over rays)
# ---------------------------------------------------------------------------


def _ray_plane(o, d, plane: TexturedPlane):
    dn = d @ plane.normal
    safe = np.where(np.abs(dn) > 1e-12, dn, 1.0)
    t = ((plane.point - o) @ plane.normal) / safe
    t = np.where(np.abs(dn) > 1e-12, t, np.inf)
    x = o[None, :] + t[:, None] * d
    lu = (x - plane.point) @ plane.u_axis
    lv = (x - plane.point) @ plane.v_axis
    ok = (t > _T_MIN) & (np.abs(lu) <= plane.half_u) & (np.abs(lv) <= plane.half_v)
    return np.where(ok, t, np.inf), lu, lv


def _ray_box(o, d, box: TexturedBox, pose: RigidTransform):
    inv = pose.inverse()
    R = quat_to_matrix(inv.q)
    ol = R @ o + inv.t
    dl = d @ R.T
    h = box.half_sizes
    dl_safe = np.where(np.abs(dl) > 1e-12, dl, 1e-12)
    t1 = (-h[None, :] - ol[None, :]) / dl_safe
    t2 = (h[None, :] - ol[None, :]) / dl_safe
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    tnear = tn.max(axis=1)
    tfar = tf.min(axis=1)
    hit = (tfar >= tnear) & (tnear > _T_MIN)
    t = np.where(hit, tnear, np.inf)
    axis = tn.argmax(axis=1)
    x = ol[None, :] + t[:, None] * dl
    # face-local texture coordinates from the two free axes
    a1 = (axis + 1) % 3
    a2 = (axis + 2) % 3
    rows = np.arange(x.shape[0])
    lu = x[rows, a1] + 0.61 * axis       # decorate each face differently
    lv = x[rows, a2] + 0.23 * axis
    return t, lu, lv


def _ray_capsule(o, d, a, b, radius):
    """Smallest ray parameter hitting the capsule [a, b] with given radius."""
    ab = b - a
    len2 = float(ab @ ab)
    t_best = np.full(d.shape[0], np.inf)
    if len2 > 1e-16:
        ao = o - a
        d_par = (d @ ab)[:, None] * ab[None, :] / len2
        n = d - d_par
        m = ao - (ao @ ab) / len2 * ab
        A = (n * n).sum(axis=1)
        B = 2.0 * (n * m[None, :]).sum(axis=1)
        C = float(m @ m) - radius * radius
        disc = B * B - 4.0 * A * C
        ok = (disc >= 0) & (A > 1e-14)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_cyl = (-B - sq) / np.where(ok, 2.0 * A, 1.0)
        s = ((o + t_cyl[:, None] * d - a) @ ab) / len2
        good = ok & (t_cyl > _T_MIN) & (s >= 0.0) & (s <= 1.0)
        t_best = np.where(good, t_cyl, np.inf)
    for cap in (a, b):
        ao = o - cap
        A = (d * d).sum(axis=1)
        B = 2.0 * (d @ ao)
        C = float(ao @ ao) - radius * radius
        disc = B * B - 4.0 * A * C
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_sph = (-B - sq) / (2.0 * A)
        good = ok & (t_sph > _T_MIN)
        t_best = np.minimum(t_best, np.where(good, t_sph, np.inf))
    return t_best


def _figure_palette(label: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed * 1000 + label)
    return rng.uniform(0.2, 0.8, size=(N_JOINTS, 3))


# ---------------------------------------------------------------------------
# frame synthesis
# ---------------------------------------------------------------------------


def _pixel_rays(K: Intrinsics, pose: CameraPose):
    u = np.arange(K.width, dtype=np.float64)
    v = np.arange(K.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack(
        [(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    dirs_world = quat_rotate(pose.q, dirs_cam)
    return pose.t.copy(), dirs_world


def _raycast(scene: SyntheticScene, i: int):
    """Closest-hit pass for frame i.

    Returns depth (H*W,), label map, color, bone id (figures, else -1),
    capsule axial/angular coordinates for figure texturing.
    """
    K = scene.intrinsics
    pose = scene.camera_track[i]
    o, d = _pixel_rays(K, pose)
    n = d.shape[0]

    best_t = np.full(n, np.inf)
    label = np.zeros(n, np.int32)
    color = np.zeros((n, 3))
    bone = np.full(n, -1, np.int32)

    for plane in scene.planes:
        t, lu, lv = _ray_plane(o, d, plane)
        closer = t < best_t
        if closer.any():
            best_t = np.where(closer, t, best_t)
            label[closer] = 0
            bone[closer] = -1
            color[closer] = plane.texture.evaluate(lu[closer], lv[closer])

    for box in scene.boxes:
        t, lu, lv = _ray_box(o, d, box, box.track[i])
        closer = t < best_t
        if closer.any():
            best_t = np.where(closer, t, best_t)
            label[closer] = box.label
            bone[closer] = -1
            color[closer] = box.texture.evaluate(lu[closer], lv[closer])

    for fig in scene.figures:
        bones_world = fig.world_bone_transforms(i)
        palette = _figure_palette(fig.label, fig.palette_seed)
        for child in range(1, N_JOINTS):
            parent = PARENTS[child]
            a = bones_world[parent].t
            b = bones_world[child].t
            radius = BONE_RADIUS[child] * fig.scale
            t = _ray_capsule(o, d, a, b, radius)
            closer = t < best_t
            if closer.any():
                best_t = np.where(closer, t, best_t)
                label[closer] = fig.label
                bone[closer] = child
                x = o[None, :] + best_t[:, None] * d
                ab = b - a
                s = np.clip(
                    ((x[closer] - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0
                )
                base = palette[child]
                stripes = 0.18 * np.sin(2 * np.pi * (3.0 * s + 0.13 * child))
                color[closer] = np.clip(base[None, :] + stripes[:, None], 0.05, 0.95)

    return best_t, label, color, bone, (o, d)


def _entity_motion(scene: SyntheticScene, i: int, label_map, bone_map):
    """Rigid world motion i -> i+1 for every (label, bone) present."""
    motions: dict[tuple[int, int], RigidTransform] = {(0, -1): RigidTransform()}
    for box in scene.boxes:
        motions[(box.label, -1)] = box.track[i + 1].compose(box.track[i].inverse())
    for fig in scene.figures:
        wb_t = fig.world_bone_transforms(i)
        wb_t1 = fig.world_bone_transforms(i + 1)
        for child in range(1, N_JOINTS):
            motions[(fig.label, child)] = wb_t1[child].compose(wb_t[child].inverse())
    return motions


def simulate(scene: SyntheticScene) -> SimulationResult:
    K = scene.intrinsics
    n_frames = len(scene.camera_track)
    rng = np.random.default_rng(scene.seed)

    entities = tuple(
        [EntityInfo(b.label, "item", f"box{b.label}") for b in scene.boxes]
        + [EntityInfo(f.label, "figure", f"figure{f.label}") for f in scene.figures]
    )

    trajectory = Trajectory()
    frames: list[Frame] = []
    exact: list[ExactFrame] = []

    casts = [_raycast(scene, i) for i in range(n_frames)]

    for i in range(n_frames):
        ts = i / scene.fps
        pose = scene.camera_track[i]
        trajectory.append(ts, pose)
        best_t, label, color, bone, (o, d) = casts[i]

        hit = np.isfinite(best_t)
        depth = np.where(hit, best_t, 0.0).reshape(K.height, K.width)
        seg = label.reshape(K.height, K.width).copy()
        seg[~hit.reshape(K.height, K.width)] = 0
        rgb = np.where(hit[:, None], color, 0.0).reshape(K.height, K.width, 3)

        flow = None
        if i + 1 < n_frames:
            x_world = o[None, :] + best_t[:, None] * d
            motions = _entity_motion(scene, i, label, bone)
            x_next = np.full_like(x_world, np.nan)
            for (lab, bn), tf in motions.items():
                sel = hit & (label == lab) & (bone == bn)
                if sel.any():
                    x_next[sel] = tf.apply(x_world[sel])
            cam_next = scene.camera_track[i + 1]
            pts_cam = cam_next.world_to_camera(
                np.where(np.isfinite(x_next), x_next, 0.0)
            )
            uv, in_front = project_points(pts_cam, K)
            uu, vv = np.meshgrid(
                np.arange(K.width, dtype=np.float64),
                np.arange(K.height, dtype=np.float64),
            )
            du = uv[:, 0].reshape(K.height, K.width) - uu
            dv = uv[:, 1].reshape(K.height, K.width) - vv
            ok = (hit & in_front & np.isfinite(x_next).all(axis=1)).reshape(
                K.height, K.width
            )
            du = np.where(ok, du, np.nan)
            dv = np.where(ok, dv, np.nan)
            flow = FlowField(du, dv)

        # skeletal estimates: exact rotations, translations handed out at unit
        # scale so the metric scale has to be recovered from depth
        skeletons = {}
        for fig in scene.figures:
            sp = fig.poses[i]
            root_cam = RigidTransform(pose.q, pose.t).inverse().compose(sp.root)
            if root_cam.t[2] <= 0.05:
                continue  # root behind the camera: no estimate this frame
            uv_root, vis = project_points(root_cam.t[None, :], K)
            if not vis[0]:
                continue
            u0, v0 = uv_root[0]
            if not (0 <= u0 < K.width and 0 <= v0 < K.height):
                continue
            obs_joints = tuple(
                RigidTransform(j.q, j.t / fig.scale) for j in sp.joints
            )
            obs_root = RigidTransform(root_cam.q, root_cam.t / fig.scale)
            skeletons[fig.label] = SkeletonObservation(
                SkeletonPose(obs_root, obs_joints), np.array([u0, v0])
            )

        exact.append(ExactFrame(depth.copy(), rgb.copy(), flow))

        # observation noise, consumed in a fixed order per frame
        noisy_depth = depth.copy()
        if scene.noise.depth_abs > 0 or scene.noise.depth_quad > 0:
            sigma = scene.noise.depth_sigma(depth)
            pert = rng.normal(size=depth.shape) * sigma
            noisy_depth = np.where(depth > 0, np.maximum(depth + pert, 1e-3), 0.0)
        noisy_rgb = rgb
        if scene.noise.rgb > 0:
            noisy_rgb = np.clip(rgb + rng.normal(size=rgb.shape) * scene.noise.rgb, 0, 1)
        noisy_flow = flow
        if flow is not None and scene.noise.flow > 0:
            noisy_flow = FlowField(
                flow.du + rng.normal(size=flow.du.shape) * scene.noise.flow,
                flow.dv + rng.normal(size=flow.dv.shape) * scene.noise.flow,
            )
            invalid = ~flow.valid
            noisy_flow.du[invalid] = np.nan
            noisy_flow.dv[invalid] = np.nan
        if noisy_flow is not None:
            # flow validity may never exceed depth validity
            bad = ~(noisy_depth > 0)
            noisy_flow.du[bad] = np.nan
            noisy_flow.dv[bad] = np.nan

        frames.append(
            Frame(ts, noisy_rgb, noisy_depth, seg, entities, noisy_flow, skeletons)
        )

    return SimulationResult(
        frames=frames,
        intrinsics=K,
        trajectory=trajectory,
        item_tracks={b.label: list(b.track) for b in scene.boxes},
        root_tracks={f.label: [p.root for p in f.poses] for f in scene.figures},
        figure_scales={f.label: f.scale for f in scene.figures},
        exact=exact,
        scene=scene,
    )
