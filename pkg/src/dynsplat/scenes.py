"""Scripted scene presets for the synthetic generator.

World frame follows the camera convention of the rest of the system: +z into
the scene, +y down. The skeleton frame is y-up, so figure root rotations
include the flip.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import (
    CameraPose,
    Intrinsics,
    RigidTransform,
    quat_from_axis_angle,
    quat_identity,
    quat_multiply,
)
from .simulator import (
    FigureTrack,
    NoiseModel,
    SurfaceTexture,
    SyntheticScene,
    TexturedBox,
    TexturedPlane,
)
from .skeleton import REST_OFFSETS, SkeletonPose, rest_pose


def default_intrinsics(width: int = 48, height: int = 36) -> Intrinsics:
    f = 0.8 * width
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def _room_planes(rng, hx=2.2, hy=1.0, hz=2.6) -> list[TexturedPlane]:
    """A closed textured box room centered on the origin."""
    tex = lambda: SurfaceTexture.random(rng)
    return [
        # floor (y = +hy, camera y points down) and ceiling
        TexturedPlane([0, hy, 0], [1, 0, 0], [0, 0, 1], hx, hz, tex()),
        TexturedPlane([0, -hy, 0], [1, 0, 0], [0, 0, 1], hx, hz, tex()),
        # walls
        TexturedPlane([0, 0, hz], [1, 0, 0], [0, 1, 0], hx, hy, tex()),
        TexturedPlane([0, 0, -hz], [1, 0, 0], [0, 1, 0], hx, hy, tex()),
        TexturedPlane([hx, 0, 0], [0, 0, 1], [0, 1, 0], hz, hy, tex()),
        TexturedPlane([-hx, 0, 0], [0, 0, 1], [0, 1, 0], hz, hy, tex()),
    ]


def orbit_track(n_frames: int, radius: float = 1.0, total_angle: float = 2 * math.pi,
                center=(0.0, 0.0, 0.0)) -> list[CameraPose]:
    """Outward-looking circular orbit in the x-z plane."""
    track = []
    c = np.asarray(center, dtype=np.float64)
    for i in range(n_frames):
        th = total_angle * i / n_frames
        q = quat_from_axis_angle([0, 1, 0], th)
        t = c + radius * np.array([math.sin(th), 0.0, math.cos(th)])
        track.append(CameraPose(q, t))
    return track


def room_scene(seed: int = 0, n_frames: int = 100, width: int = 48, height: int = 36,
               noise: NoiseModel | None = None, radius: float = 1.0,
               total_angle: float = 2 * math.pi,
               room_half_depth: float = 2.6) -> SyntheticScene:
    """Static textured room with an orbiting camera."""
    rng = np.random.default_rng(seed)
    return SyntheticScene(
        intrinsics=default_intrinsics(width, height),
        camera_track=orbit_track(n_frames, radius, total_angle),
        planes=_room_planes(rng, hz=room_half_depth),
        noise=noise or NoiseModel(),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# rigid items
# ---------------------------------------------------------------------------


def tumbling_box_track(n_frames: int, start=(0.0, 0.1, 1.6),
                       velocity=(0.012, 0.0, 0.0), spin_axis=(0.3, 1.0, 0.2),
                       spin_per_frame: float = 0.02,
                       base_q=None) -> list[RigidTransform]:
    """Constant-velocity drift plus steady spin, optionally from a tilted rest.

    A corner-on base orientation keeps several tilted faces in view, which
    gives the depth image in-plane structure.
    """
    track = []
    s = np.asarray(start, dtype=np.float64)
    v = np.asarray(velocity, dtype=np.float64)
    base = quat_identity() if base_q is None else np.asarray(base_q, dtype=np.float64)
    for i in range(n_frames):
        q = quat_multiply(quat_from_axis_angle(spin_axis, spin_per_frame * i), base)
        track.append(RigidTransform(q, s + v * i))
    return track


def box_scene(seed: int = 0, n_frames: int = 40, width: int = 48, height: int = 36,
              noise: NoiseModel | None = None, box_kwargs: dict | None = None,
              pan_per_frame: float = math.radians(1.0)) -> SyntheticScene:
    """Room plus one tumbling textured box, slow panning camera."""
    rng = np.random.default_rng(seed)
    scene = room_scene(seed, n_frames, width, height, noise,
                       radius=0.6, total_angle=pan_per_frame * n_frames)
    corner_on = quat_multiply(
        quat_from_axis_angle([1, 0, 0], math.radians(25.0)),
        quat_from_axis_angle([0, 1, 0], math.radians(35.0)),
    )
    kwargs = dict(start=(0.0, 0.1, 1.6), velocity=(0.012, 0.0, 0.0), base_q=corner_on)
    kwargs.update(box_kwargs or {})
    scene.boxes.append(
        TexturedBox(
            half_sizes=np.array(kwargs.pop("half_sizes", (0.18, 0.18, 0.18))),
            track=tumbling_box_track(n_frames, **kwargs),
            texture=SurfaceTexture.random(rng, contrast=0.22),
            label=1,
        )
    )
    return scene


def dominated_scene(seed: int = 0, n_frames: int = 12, width: int = 40, height: int = 30,
                    noise: NoiseModel | None = None) -> SyntheticScene:
    """A large moving box fills most of the view; background is scarce."""
    rng = np.random.default_rng(seed)
    scene = room_scene(seed, n_frames, width, height,
                       noise or NoiseModel(depth_abs=0.01, rgb=0.02),
                       radius=0.5, total_angle=math.radians(0.8) * n_frames)
    scene.boxes.append(
        TexturedBox(
            half_sizes=np.array((0.48, 0.36, 0.12)),
            track=tumbling_box_track(
                n_frames, start=(0.05, 0.0, 1.45),
                velocity=(0.010, 0.004, 0.0),
                spin_axis=(0.1, 1.0, 0.05), spin_per_frame=0.012,
            ),
            texture=SurfaceTexture.random(rng, contrast=0.22),
            label=1,
        )
    )
    return scene


# ---------------------------------------------------------------------------
# articulated figures
# ---------------------------------------------------------------------------

# skeleton frame is y-up; this flips it into the y-down world
_FLIP = quat_from_axis_angle([1, 0, 0], math.pi)


def walking_pose(t: float, scale: float, start, heading: float = 0.0,
                 speed: float = 0.45, stride_hz: float = 1.4,
                 amplitude: float = 1.0) -> SkeletonPose:
    """One instant of a procedural walk cycle at true metric scale.

    start: pelvis world position at t=0. heading: walk direction, yaw about
    the world vertical. amplitude scales all joint swings (0 freezes the limbs
    into a neutral stance).
    """
    base = rest_pose(scale)
    phi = 2.0 * math.pi * stride_hz * t
    a_hip = 0.38 * amplitude
    a_knee = 0.55 * amplitude
    a_arm = 0.30 * amplitude
    a_elbow = 0.25 * amplitude

    rot = {}  # joint id -> local rotation quaternion
    rot[1] = quat_from_axis_angle([1, 0, 0], a_hip * math.sin(phi))
    rot[2] = quat_from_axis_angle([1, 0, 0], a_hip * math.sin(phi + math.pi))
    # knees only flex, peaking as the same-side hip swings back
    rot[4] = quat_from_axis_angle([1, 0, 0], -a_knee * 0.5 * (1 - math.cos(phi)) * 0.5)
    rot[5] = quat_from_axis_angle([1, 0, 0], -a_knee * 0.5 * (1 - math.cos(phi + math.pi)) * 0.5)
    rot[3] = quat_from_axis_angle([0, 1, 0], 0.06 * amplitude * math.sin(phi))
    rot[12] = quat_from_axis_angle([0, 1, 0], -0.04 * amplitude * math.sin(phi))
    rot[16] = quat_from_axis_angle([1, 0, 0], a_arm * math.sin(phi + math.pi))
    rot[17] = quat_from_axis_angle([1, 0, 0], a_arm * math.sin(phi))
    rot[18] = quat_from_axis_angle([1, 0, 0], -a_elbow * 0.5 * (1 - math.cos(phi + math.pi)) * 0.5)
    rot[19] = quat_from_axis_angle([1, 0, 0], -a_elbow * 0.5 * (1 - math.cos(phi)) * 0.5)

    joints = []
    for j in range(1, 24):
        q = rot.get(j, np.array([1.0, 0.0, 0.0, 0.0]))
        joints.append(RigidTransform(q, REST_OFFSETS[j] * scale))

    start = np.asarray(start, dtype=np.float64)
    walk_dir = np.array([math.sin(heading), 0.0, math.cos(heading)])
    bob = 0.012 * scale * amplitude * math.sin(2 * phi)
    pos = start + speed * t * walk_dir + np.array([0.0, bob, 0.0])
    root_q = quat_multiply(quat_from_axis_angle([0, 1, 0], heading + math.pi), _FLIP)
    return SkeletonPose(RigidTransform(root_q, pos), tuple(joints))


def figure_scene(seed: int = 0, n_frames: int = 30, width: int = 48, height: int = 36,
                 noise: NoiseModel | None = None, scale: float = 1.0,
                 speed: float = 0.4, amplitude: float = 1.0,
                 fps: float = 30.0, distance: float = 2.4,
                 heading_deg: float = 90.0) -> SyntheticScene:
    """Room with a figure walking across the view; gently panning camera."""
    rng = np.random.default_rng(seed)
    scene = room_scene(seed, n_frames, width, height, noise,
                       radius=0.4, total_angle=math.radians(0.5) * n_frames,
                       room_half_depth=max(2.6, distance + 0.8))
    scene.fps = fps
    heading = math.radians(heading_deg)
    duration = speed * n_frames / fps
    # center the walk on the view and keep the figure clear of the walls
    start = np.array([-0.5 * duration * math.sin(heading), -0.04 * scale,
                      distance - 0.5 * duration * math.cos(heading)])
    poses = [
        walking_pose(i / fps, scale, start, heading=heading,
                     speed=speed, amplitude=amplitude)
        for i in range(n_frames)
    ]
    scene.figures.append(FigureTrack(scale=scale, poses=poses, label=1,
                                     palette_seed=seed))
    return scene


# ---------------------------------------------------------------------------
# repetitive geometry for alignment stress tests
# ---------------------------------------------------------------------------


def repetitive_scene(seed: int = 0, n_frames: int = 16, width: int = 48,
                     height: int = 36, noise: NoiseModel | None = None,
                     slat_period: float = 0.24) -> SyntheticScene:
    """A wall of regularly spaced slats: geometry aliases at the slat period,
    appearance does not (each slat draws from one globally varying texture)."""
    rng = np.random.default_rng(seed)
    scene = room_scene(seed, n_frames, width, height, noise,
                       radius=0.25, total_angle=math.radians(1.2) * n_frames)
    tex = SurfaceTexture.random(rng, contrast=0.2)
    # make the shared texture vary slowly so slats are told apart by color
    tex.freq = rng.uniform(0.25, 0.7, size=tex.freq.shape) * np.sign(tex.freq)
    for k in range(-4, 5):
        scene.planes.append(
            TexturedPlane(
                [k * slat_period, 0.0, 2.05], [1, 0, 0], [0, 1, 0],
                slat_period * 0.28, 0.95, tex,
            )
        )
    return scene


PRESETS = {
    "room": room_scene,
    "box": box_scene,
    "figure": figure_scene,
    "dominated": dominated_scene,
    "repetitive": repetitive_scene,
}


def scene_from_config(cfg: dict) -> SyntheticScene:
    """Build a preset scene from a plain dict (the structured-text format)."""
    cfg = dict(cfg)
    preset = cfg.pop("preset", "room")
    if preset not in PRESETS:
        raise ValueError(f"unknown scene preset {preset!r}; have {sorted(PRESETS)}")
    noise_cfg = cfg.pop("noise", None)
    if noise_cfg is not None:
        known = {"depth_abs", "depth_quad", "rgb", "flow"}
        bad = set(noise_cfg) - known
        if bad:
            raise ValueError(f"unknown noise keys {sorted(bad)}")
        cfg["noise"] = NoiseModel(**noise_cfg)
    if "frames" in cfg:
        cfg["n_frames"] = cfg.pop("frames")
    return PRESETS[preset](**cfg)
