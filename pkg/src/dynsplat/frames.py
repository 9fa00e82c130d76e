"""In-memory frame bundle and trajectory types.

A Frame carries everything the tracker sees for one timestamp: color, depth,
a per-pixel entity label map, dense forward flow, and per-figure skeletal
estimates. Label 0 is always the static background; other labels are declared
in the frame's entity list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .geometry import CameraPose
from .skeleton import SkeletonObservation

BACKGROUND_LABEL = 0


@dataclass(frozen=True)
class EntityInfo:
    label: int
    kind: str           # "item" (rigid) or "figure" (articulated)
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("item", "figure"):
            raise ValueError(f"unknown entity kind {self.kind!r}")
        if self.label == BACKGROUND_LABEL:
            raise ValueError("label 0 is reserved for the background")


@dataclass
class FlowField:
    """Dense pixel motion into the next frame; invalid pixels are NaN."""

    du: np.ndarray   # (H, W)
    dv: np.ndarray   # (H, W)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.du) & np.isfinite(self.dv)

    def vectors(self) -> np.ndarray:
        return np.stack([self.du, self.dv], axis=-1)


@dataclass
class Frame:
    timestamp: float
    rgb: np.ndarray                    # (H, W, 3) float64 in [0, 1]
    depth: np.ndarray                  # (H, W) float64 meters, 0 invalid
    seg: np.ndarray | None = None      # (H, W) int labels
    entities: tuple[EntityInfo, ...] = ()
    flow_to_next: FlowField | None = None
    skeletons: dict[int, SkeletonObservation] = field(default_factory=dict)

    def __post_init__(self):
        h, w, c = self.rgb.shape
        if c != 3 or self.depth.shape != (h, w):
            raise ValueError("rgb/depth shape mismatch")
        if self.seg is not None and self.seg.shape != (h, w):
            raise ValueError("segmentation shape mismatch")
        if self.seg is not None:
            declared = {e.label for e in self.entities} | {BACKGROUND_LABEL}
            present = set(np.unique(self.seg).tolist())
            undeclared = present - declared
            if undeclared:
                raise ValueError(f"segmentation labels {sorted(undeclared)} not declared")
        if self.flow_to_next is not None:
            # flow validity can never exceed depth validity
            bad = self.flow_to_next.valid & ~(self.depth > 0)
            if bad.any():
                raise ValueError("flow marked valid on pixels without depth")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def entity_mask(self, label: int) -> np.ndarray:
        if self.seg is None:
            return np.zeros(self.rgb.shape[:2], bool)
        return self.seg == label

    def background_mask(self) -> np.ndarray:
        if self.seg is None:
            return np.ones(self.rgb.shape[:2], bool)
        return self.seg == BACKGROUND_LABEL


def new_observation_mask(entity_mask: np.ndarray, rendered_alpha,
                         alpha_threshold: float = 0.5,
                         opening_radius: int = 1) -> np.ndarray:
    """Pixels of an entity that its current model fails to cover.

    A pixel qualifies when the entity owns it but an entity-only render leaves
    it mostly transparent. A morphological opening drops speckle so single
    stray pixels do not spawn Gaussians.
    """
    alpha = np.asarray(rendered_alpha, dtype=np.float64)
    raw = np.asarray(entity_mask, bool) & (alpha < alpha_threshold)
    if opening_radius > 0:
        size = 2 * opening_radius + 1
        yy, xx = np.mgrid[-opening_radius:opening_radius + 1,
                          -opening_radius:opening_radius + 1]
        structure = (xx * xx + yy * yy) <= opening_radius * opening_radius
        raw = ndi.binary_opening(raw, structure=structure)
    return raw


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return np.asarray(mask, bool)
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    structure = (xx * xx + yy * yy) <= radius * radius
    return ndi.binary_erosion(np.asarray(mask, bool), structure=structure)


@dataclass
class Trajectory:
    """Timestamped camera track; rows align by index."""

    timestamps: list[float] = field(default_factory=list)
    poses: list[CameraPose] = field(default_factory=list)

    def append(self, ts: float, pose: CameraPose) -> None:
        self.timestamps.append(float(ts))
        self.poses.append(pose)

    def __len__(self) -> int:
        return len(self.timestamps)

    def positions(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses]) if self.poses else np.zeros((0, 3))

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write("# timestamp tx ty tz qx qy qz qw\n")
            for ts, p in zip(self.timestamps, self.poses):
                qw, qx, qy, qz = p.q
                tx, ty, tz = p.t
                f.write(
                    f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                    f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n"
                )

    @classmethod
    def read(cls, path) -> "Trajectory":
        out = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                vals = [float(x) for x in line.split()]
                if len(vals) != 8:
                    raise ValueError(f"bad trajectory row: {line!r}")
                ts, tx, ty, tz, qx, qy, qz, qw = vals
                out.append(ts, CameraPose([qw, qx, qy, qz], [tx, ty, tz]))
        return out
