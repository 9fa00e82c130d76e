"""Pose-conditioned deformation of skeleton-attached Gaussians.

A compact MLP reads the frequency-encoded canonical position of each Gaussian
together with the flattened per-joint pose change and predicts a position
offset plus a rotation correction. Both output layers start at zero, so a
freshly built net deforms nothing; appearance attributes never pass through
the net at all.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .gaussians import GaussianSet
from .skeleton import N_JOINTS, variation_to_array
from .torchmath import DTYPE, quat_multiply_t, quat_normalize_t, to_tensor

N_BANDS = 10
WIDTH = 256
DEPTH = 8

_IDENTITY = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)


def positional_encoding(points, n_bands: int = N_BANDS) -> torch.Tensor:
    """Harmonic features per coordinate: raw value plus sin/cos pairs.

    Frequencies double per band starting at pi, so (N, 3) positions become
    (N, 3 * (1 + 2 * n_bands)) features, ordered raw, then band by band.
    """
    pts = to_tensor(points).reshape(-1, 3)
    feats = [pts]
    for k in range(n_bands):
        arg = (2.0 ** k) * math.pi * pts
        feats.append(torch.sin(arg))
        feats.append(torch.cos(arg))
    return torch.cat(feats, dim=-1)


def flatten_variation(variation) -> torch.Tensor:
    """Joint motions to a flat tensor, quaternion then shift per joint."""
    if isinstance(variation, torch.Tensor):
        return variation.to(DTYPE).reshape(-1)
    return to_tensor(variation_to_array(list(variation))).reshape(-1)


class DeformationNet(nn.Module):
    """MLP from encoded position and pose change to a per-Gaussian motion.

    Stacked linear layers with tanh lift the input to a wide feature vector;
    two independent zero-initialized readouts produce the position offset and
    the quaternion residual added onto identity. Width, depth and band count
    are parameters so a config can shrink the net.
    """

    def __init__(self, n_bands: int = N_BANDS, width: int = WIDTH,
                 depth: int = DEPTH, seed: int = 0):
        super().__init__()
        self.n_bands = n_bands
        in_dim = 3 * (1 + 2 * n_bands) + 7 * (N_JOINTS - 1)
        layers = []
        d = in_dim
        for _ in range(depth):
            layers.append(nn.Linear(d, width, dtype=DTYPE))
            d = width
        self.trunk = nn.ModuleList(layers)
        self.pos_head = nn.Linear(width, 3, dtype=DTYPE)
        self.rot_head = nn.Linear(width, 4, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in self.trunk:
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            for head in (self.pos_head, self.rot_head):
                head.weight.zero_()
                head.bias.zero_()

    @property
    def in_features(self) -> int:
        return self.trunk[0].in_features

    def forward(self, centers, variation_flat):
        enc = positional_encoding(centers, self.n_bands)
        var = flatten_variation(variation_flat)
        h = torch.cat([enc, var.reshape(1, -1).expand(enc.shape[0], -1)], dim=-1)
        for lin in self.trunk:
            h = torch.tanh(lin(h))
        dpos = self.pos_head(h)
        dq = quat_normalize_t(_IDENTITY + self.rot_head(h))
        return dpos, dq


def deform_tensors(net: DeformationNet, centers: torch.Tensor,
                   rotations: torch.Tensor, variation_flat: torch.Tensor):
    """Deformed (centers, rotations); differentiable in net weights and inputs.

    Centers get the predicted offset added; orientations get the predicted
    quaternion multiplied on from the left. The stored orientation is used as
    is, so an identity prediction is an exact passthrough.
    """
    dpos, dq = net(centers, variation_flat)
    return centers + dpos, quat_multiply_t(dq, rotations)


def deform(gaussians: GaussianSet, net: DeformationNet, variation) -> GaussianSet:
    """Apply the net to a whole set; colors, opacities and scales carry over."""
    flat = flatten_variation(variation)
    with torch.no_grad():
        centers, rotations = deform_tensors(
            net, gaussians.centers, gaussians.rotations, flat)
    return GaussianSet(
        centers, rotations,
        gaussians.scales.detach().clone(),
        gaussians.opacity_logits.detach().clone(),
        gaussians.colors.detach().clone(),
        None if gaussians.dir_colors is None else gaussians.dir_colors.detach().clone(),
    )
