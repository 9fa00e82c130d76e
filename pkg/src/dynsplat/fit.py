"""First-order fitting of Gaussian attributes against observed patches.

The render call owns the forward graph; losses are evaluated on its output
maps, pulled back to per-attribute gradients through the renderer's backward
contract, and applied with a self-contained Adam so every caller (item
initialization, map refinement, background optimization) shares one updater.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .gaussians import GaussianSet
from .geometry import CameraPose, Intrinsics
from .losses import (
    DEPTH_WEIGHT,
    L1_MIX,
    PHOTOMETRIC_WEIGHT,
    composite_loss,
    depth_loss,
    photometric_loss,
)
from .renderer import RenderConfig, render, render_backward

TRAINABLE = ("centers", "rotations", "scales", "opacity_logits", "colors")

DEFAULT_LRS = {
    "centers": 2e-3,
    "rotations": 2e-3,
    "scales": 2e-3,
    "opacity_logits": 0.05,
    "colors": 0.02,
}


@dataclass
class FitView:
    """One observed RGB-D patch a Gaussian set should explain."""

    rgb: np.ndarray                  # (H, W, 3) full-frame
    depth: np.ndarray                # (H, W)
    mask: np.ndarray                 # (H, W) bool, pixels that count
    pose: CameraPose
    roi: tuple[int, int, int, int] | None = None   # (x0, y0, w, h)


@dataclass
class LossWeights:
    l1_mix: float = L1_MIX
    photometric: float = PHOTOMETRIC_WEIGHT
    depth: float = DEPTH_WEIGHT
    alpha_min: float = 0.5


class Adam:
    """Keyed Adam accumulator over numpy/torch arrays."""

    def __init__(self, lr: float | dict, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict = {}
        self._v: dict = {}
        self._t: dict = {}

    def _rate(self, key) -> float:
        if isinstance(self.lr, dict):
            return self.lr[key]
        return self.lr

    def step(self, key, grad: torch.Tensor) -> torch.Tensor:
        """Return the update to ADD to the parameter for this gradient."""
        if key not in self._m:
            self._m[key] = torch.zeros_like(grad)
            self._v[key] = torch.zeros_like(grad)
            self._t[key] = 0
        self._t[key] += 1
        t = self._t[key]
        m = self._m[key] = self.beta1 * self._m[key] + (1 - self.beta1) * grad
        v = self._v[key] = self.beta2 * self._v[key] + (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return -self._rate(key) * m_hat / (v_hat.sqrt() + self.eps)


def crop(arr: np.ndarray, roi: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, w, h = roi
    return arr[y0:y0 + h, x0:x0 + w]


def mask_roi(mask: np.ndarray, margin: int = 2,
             shape: tuple[int, int] | None = None) -> tuple[int, int, int, int]:
    """Tight bounding box around a mask, padded and clipped to the image."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask has no region of interest")
    h, w = shape or mask.shape
    x0 = max(int(xs.min()) - margin, 0)
    y0 = max(int(ys.min()) - margin, 0)
    x1 = min(int(xs.max()) + margin + 1, w)
    y1 = min(int(ys.max()) + margin + 1, h)
    return (x0, y0, x1 - x0, y1 - y0)


def patch_objective(patch, view: FitView, weights: LossWeights):
    """Composite loss of a rendered patch against its observed view.

    Returns (loss tensor on the render graph, masked pixel count).
    """
    roi = patch.roi
    obs_rgb = crop(view.rgb, roi)
    obs_depth = crop(view.depth, roi)
    m = crop(view.mask, roi)
    n = int(np.count_nonzero(m))
    if n == 0:
        return None, 0
    photo = photometric_loss(patch.rgb, obs_rgb, m, weights.l1_mix)
    dep = depth_loss(patch.depth, obs_depth, m, patch.alpha, weights.alpha_min)
    return composite_loss(photo, dep, weights.photometric, weights.depth), n


def pull_gradients(patch, loss: torch.Tensor):
    """Upstream per-pixel gradient of a loss on this patch, then attribute
    gradients through the renderer's backward contract."""
    d_rgb, d_depth = torch.autograd.grad(
        loss, [patch.rgb, patch.depth], retain_graph=True, allow_unused=True
    )
    x0, y0, w, h = patch.roi
    up = torch.zeros((h, w, 4), dtype=patch.rgb.dtype)
    if d_rgb is not None:
        up[..., :3] = d_rgb
    if d_depth is not None:
        up[..., 3] = d_depth
    return render_backward(patch, up)


def fit_gaussians(gaussians: GaussianSet, views: list[FitView], K: Intrinsics,
                  n_iters: int, train: tuple[str, ...] = TRAINABLE[1:],
                  lrs: dict | None = None, weights: LossWeights | None = None,
                  rows: np.ndarray | None = None,
                  sum_views: bool = False,
                  render_config: RenderConfig | None = None) -> list[float]:
    """Adam-fit selected attributes of a Gaussian set to observed views.

    views are cycled one per iteration unless sum_views, which accumulates
    every view's gradient each step (the two-view constraint pattern). rows
    restricts updates to a subset of Gaussians. Returns the loss history.
    """
    weights = weights or LossWeights()
    adam = Adam(dict(DEFAULT_LRS, **(lrs or {})))
    history: list[float] = []
    row_idx = None if rows is None else torch.as_tensor(np.asarray(rows, dtype=np.int64))

    for it in range(n_iters):
        batch = views if sum_views else [views[it % len(views)]]
        total = {a: None for a in train}
        loss_value = 0.0
        for view in batch:
            patch = render(gaussians, view.pose, K, view.roi,
                           save_graph=True, config=render_config)
            loss, n = patch_objective(patch, view, weights)
            if loss is None:
                continue
            grads = pull_gradients(patch, loss)
            loss_value += float(loss)
            for a in train:
                g = getattr(grads, a)
                total[a] = g if total[a] is None else total[a] + g
        history.append(loss_value)
        with torch.no_grad():
            for a in train:
                if total[a] is None:
                    continue
                update = adam.step(a, total[a])
                param = getattr(gaussians, a)
                if row_idx is None:
                    param += update
                else:
                    param[row_idx] += update[row_idx]
        gaussians.apply_constraints()
    return history
