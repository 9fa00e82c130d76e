"""Optimization objectives shared by mapping and localization.

The photometric term mixes masked mean absolute error with a structural
similarity term computed over an 11x11 Gaussian window (sigma 1.5,
stability constants 0.01^2 and 0.03^2 for unit-range images). Both images
are zeroed outside the mask before windowing, so pixels outside the mask
cannot influence the value at all.
"""

from __future__ import annotations

import torch

from .torchmath import DTYPE, to_tensor

L1_MIX = 0.8                 # weight of the L1 part inside the photometric term
PHOTOMETRIC_WEIGHT = 0.6     # composite weight of the photometric term
DEPTH_WEIGHT = 0.4           # composite weight of the depth term
SCALE_REG_WEIGHT = 1.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _gaussian_kernel(window: int, sigma: float) -> torch.Tensor:
    half = (window - 1) / 2.0
    x = torch.arange(window, dtype=DTYPE) - half
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    k = torch.outer(g, g)
    return k / k.sum()


_KERNEL_CACHE: dict[tuple[int, float], torch.Tensor] = {}


def _kernel(window: int, sigma: float) -> torch.Tensor:
    key = (window, sigma)
    if key not in _KERNEL_CACHE:
        _KERNEL_CACHE[key] = _gaussian_kernel(window, sigma)
    return _KERNEL_CACHE[key]


def _window_mean(img: torch.Tensor, window: int, sigma: float) -> torch.Tensor:
    """Gaussian-weighted local means of an (H, W, C) image, zero padded."""
    k = _kernel(window, sigma)
    c = img.shape[-1]
    x = img.permute(2, 0, 1).unsqueeze(1)                  # (C, 1, H, W)
    w = k.reshape(1, 1, window, window)
    out = torch.nn.functional.conv2d(x, w, padding=window // 2)
    return out.squeeze(1).permute(1, 2, 0)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = _SSIM_WINDOW,
             sigma: float = _SSIM_SIGMA) -> torch.Tensor:
    """Per-pixel structural similarity of two (H, W, C) unit-range images."""
    mu_a = _window_mean(a, window, sigma)
    mu_b = _window_mean(b, window, sigma)
    var_a = _window_mean(a * a, window, sigma) - mu_a * mu_a
    var_b = _window_mean(b * b, window, sigma) - mu_b * mu_b
    cov = _window_mean(a * b, window, sigma) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return num / den


def photometric_loss(rendered: torch.Tensor, observed, mask,
                     l1_mix: float = L1_MIX) -> torch.Tensor:
    """l1_mix * masked L1 + (1 - l1_mix) * (1 - masked mean SSIM).

    rendered: (H, W, 3) tensor, may carry a graph. observed: array or tensor.
    mask: (H, W) boolean; raises on an empty mask so callers must decide what
    a frame with no usable pixels means.
    """
    observed = to_tensor(observed)
    m = torch.as_tensor(mask, dtype=torch.bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("photometric loss over an empty mask")
    mf = m.to(DTYPE).unsqueeze(-1)
    l1 = (rendered - observed).abs().mul(mf).sum() / (3.0 * n)
    if l1_mix >= 1.0:
        return l1
    s = ssim_map(rendered * mf, observed * mf)
    s_masked = s.mul(mf).sum() / (3.0 * n)
    return l1_mix * l1 + (1.0 - l1_mix) * (1.0 - s_masked)


def depth_loss(rendered_depth: torch.Tensor, observed, mask,
               rendered_alpha: torch.Tensor, alpha_min: float = 0.5) -> torch.Tensor:
    """Masked mean absolute depth error.

    Pixels count only where the mask holds, the observation is positive, and
    the rendered opacity reaches alpha_min (transparent renders say nothing
    about depth). An empty effective mask yields 0.
    """
    observed = to_tensor(observed)
    m = torch.as_tensor(mask, dtype=torch.bool) & (observed > 0)
    m = m & (rendered_alpha.detach() >= alpha_min)
    n = int(m.sum())
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    return (rendered_depth - observed).abs().mul(m.to(DTYPE)).sum() / n


def scale_regularizer(scales: torch.Tensor, target: float) -> torch.Tensor:
    """Squared gap between the mean Gaussian scale and a fixed target."""
    return (scales.mean() - target) ** 2


def composite_loss(photo: torch.Tensor, depth: torch.Tensor,
                   photometric_weight: float = PHOTOMETRIC_WEIGHT,
                   depth_weight: float = DEPTH_WEIGHT) -> torch.Tensor:
    return photometric_weight * photo + depth_weight * depth
