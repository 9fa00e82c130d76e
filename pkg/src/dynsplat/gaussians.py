"""Gaussian primitive storage.

A GaussianSet is a flat tensor container: centers, orientations (stored as
raw quaternions, normalized on read), anisotropic scales, opacity held in
(0, 1) through a logistic reparameterization, and color as a base RGB triple
plus optional degree-1 directional coefficients.

Background and per-entity Gaussians live in separate sets; an index is only
meaningful together with the set that owns it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .torchmath import (
    DTYPE,
    quat_multiply_t,
    quat_normalize_t,
    quat_rotate_t,
    to_tensor,
)

SCALE_FLOOR = 1e-8

_MAGIC = b"GSPLAT01"


@dataclass
class GaussianView:
    """A bundle of (possibly graph-carrying) attribute tensors for rendering."""

    centers: torch.Tensor        # (N, 3) world
    rotations: torch.Tensor      # (N, 4) raw quaternions, normalized on use
    scales: torch.Tensor         # (N, 3) positive, meters
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor         # (N, 3) base RGB in [0, 1]
    dir_colors: torch.Tensor | None = None  # (N, 3, 3) per-channel linear coeffs

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)


class GaussianSet:
    """Mutable owner of Gaussian attribute tensors (float64, CPU)."""

    def __init__(self, centers, rotations, scales, opacity_logits, colors, dir_colors=None):
        self.centers = to_tensor(centers).reshape(-1, 3)
        n = self.centers.shape[0]
        self.rotations = to_tensor(rotations).reshape(n, 4)
        self.scales = to_tensor(scales).reshape(n, 3)
        self.opacity_logits = to_tensor(opacity_logits).reshape(n)
        self.colors = to_tensor(colors).reshape(n, 3)
        self.dir_colors = None if dir_colors is None else to_tensor(dir_colors).reshape(n, 3, 3)
        self.apply_constraints()

    # -- construction -----------------------------------------------------

    @classmethod
    def empty(cls) -> "GaussianSet":
        z = np.zeros((0,))
        return cls(z.reshape(0, 3), np.zeros((0, 4)), np.zeros((0, 3)), z, np.zeros((0, 3)))

    @classmethod
    def from_points(cls, points, colors, scales, opacity_logit: float = 0.5) -> "GaussianSet":
        """Isotropic Gaussians at given world points.

        scales: scalar per point (N,) or a single float, used for all 3 axes.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = points.shape[0]
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64).reshape(-1, 1), (n, 3))
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        logits = np.full(n, float(opacity_logit))
        return cls(points, rot, scales, logits, np.asarray(colors, dtype=np.float64).reshape(n, 3))

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    # -- views ------------------------------------------------------------

    def view(self, **overrides) -> GaussianView:
        """A GaussianView of this set, with any attribute tensor replaced.

        Overrides may carry autograd graphs; the set itself is not modified.
        """
        fields = dict(
            centers=self.centers,
            rotations=self.rotations,
            scales=self.scales,
            opacity_logits=self.opacity_logits,
            colors=self.colors,
            dir_colors=self.dir_colors,
        )
        for k, v in overrides.items():
            if k not in fields:
                raise KeyError(f"unknown gaussian attribute {k!r}")
            fields[k] = v
        return GaussianView(**fields)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    # -- mutation ---------------------------------------------------------

    def apply_constraints(self) -> None:
        """Clamp invariants back into range; call after every optimizer step."""
        with torch.no_grad():
            self.scales.clamp_(min=SCALE_FLOOR)
            self.colors.clamp_(0.0, 1.0)
            norms = self.rotations.norm(dim=-1, keepdim=True)
            bad = norms.squeeze(-1) < 1e-12
            if bool(bad.any()):
                self.rotations[bad] = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)

    def requires_grad_(self, flag: bool, attrs=None) -> None:
        names = attrs or ["centers", "rotations", "scales", "opacity_logits", "colors"]
        for name in names:
            t = getattr(self, name)
            if t is not None:
                t.requires_grad_(flag)

    def detach_(self) -> None:
        for name in ("centers", "rotations", "scales", "opacity_logits", "colors", "dir_colors"):
            t = getattr(self, name)
            if t is not None:
                setattr(self, name, t.detach())

    def clone(self) -> "GaussianSet":
        return GaussianSet(
            self.centers.detach().clone(),
            self.rotations.detach().clone(),
            self.scales.detach().clone(),
            self.opacity_logits.detach().clone(),
            self.colors.detach().clone(),
            None if self.dir_colors is None else self.dir_colors.detach().clone(),
        )

    def subset(self, idx) -> "GaussianSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return GaussianSet(
            self.centers[idx].detach(),
            self.rotations[idx].detach(),
            self.scales[idx].detach(),
            self.opacity_logits[idx].detach(),
            self.colors[idx].detach(),
            None if self.dir_colors is None else self.dir_colors[idx].detach(),
        )

    def append(self, other: "GaussianSet") -> None:
        if len(other) == 0:
            return
        self.centers = torch.cat([self.centers.detach(), other.centers.detach()])
        self.rotations = torch.cat([self.rotations.detach(), other.rotations.detach()])
        self.scales = torch.cat([self.scales.detach(), other.scales.detach()])
        self.opacity_logits = torch.cat(
            [self.opacity_logits.detach(), other.opacity_logits.detach()]
        )
        self.colors = torch.cat([self.colors.detach(), other.colors.detach()])
        if self.dir_colors is not None or other.dir_colors is not None:
            a = self.dir_colors if self.dir_colors is not None else torch.zeros(
                (len(self), 3, 3), dtype=DTYPE
            )
            b = other.dir_colors if other.dir_colors is not None else torch.zeros(
                (len(other), 3, 3), dtype=DTYPE
            )
            self.dir_colors = torch.cat([a.detach(), b.detach()])

    def transform_(self, rigid) -> None:
        """Rigidly move every Gaussian: centers mapped, orientations conjugated."""
        with torch.no_grad():
            q = to_tensor(rigid.q)
            t = to_tensor(rigid.t)
            self.centers = quat_rotate_t(q.unsqueeze(0), self.centers.detach()) + t
            self.rotations = quat_multiply_t(
                q.unsqueeze(0).expand(len(self), 4), quat_normalize_t(self.rotations.detach())
            )

    def transformed_view(self, q: torch.Tensor, t: torch.Tensor) -> GaussianView:
        """Like transform_ but differentiable and non-mutating."""
        centers = quat_rotate_t(q.unsqueeze(0), self.centers) + t
        rotations = quat_multiply_t(
            q.unsqueeze(0).expand(len(self), 4), quat_normalize_t(self.rotations)
        )
        return self.view(centers=centers, rotations=rotations)

    # -- serialization ----------------------------------------------------

    def save(self, path) -> None:
        """Binary container: magic, count, attribute layout, raw arrays."""
        path = Path(path)
        attrs = [
            ("centers", self.centers, 3),
            ("rotations", self.rotations, 4),
            ("scales", self.scales, 3),
            ("opacity_logits", self.opacity_logits, 1),
            ("colors", self.colors, 3),
        ]
        if self.dir_colors is not None:
            attrs.append(("dir_colors", self.dir_colors, 9))
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<QI", len(self), len(attrs)))
            for name, _, width in attrs:
                nb = name.encode()
                f.write(struct.pack("<HI", len(nb), width))
                f.write(nb)
            for _, tensor, width in attrs:
                f.write(
                    tensor.detach().cpu().numpy().astype("<f8").reshape(len(self), width).tobytes()
                )

    @classmethod
    def load(cls, path) -> "GaussianSet":
        path = Path(path)
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != _MAGIC:
                raise ValueError(f"{path}: bad magic {magic!r}")
            count, n_attrs = struct.unpack("<QI", f.read(12))
            layout = []
            for _ in range(n_attrs):
                nlen, width = struct.unpack("<HI", f.read(6))
                layout.append((f.read(nlen).decode(), width))
            data = {}
            for name, width in layout:
                raw = f.read(count * width * 8)
                data[name] = np.frombuffer(raw, dtype="<f8").reshape(count, width)
        return cls(
            data["centers"],
            data["rotations"],
            data["scales"],
            data["opacity_logits"].reshape(-1),
            data["colors"],
            data.get("dir_colors"),
        )

    def export_point_cloud(self, path) -> None:
        """Plain-text x y z r g b, one Gaussian center per line."""
        pts = self.centers.detach().cpu().numpy()
        cols = self.colors.detach().cpu().numpy()
        with open(path, "w") as f:
            for p, c in zip(pts, cols):
                f.write(
                    f"{p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n"
                )
