"""Differentiable splatting renderer.

Forward model, per pixel p:

    alpha_i = opacity_i * exp(-0.5 * d^T cov2d_i^-1 d),   d = p - mean2d_i
    c_p     = sum_i color_i * alpha_i * prod_{j<i} (1 - alpha_j)

with the sum running over splats sorted front to back by the camera-frame
depth of their center (index breaks ties), identically for every pixel of a
call. Depth composites the same weights against splat center depths; alpha is
the weight sum. Accumulation stops once transmittance falls below the
configured floor.

The 3D to 2D covariance uses the first-order projection Jacobian

    J = [[fx/z, 0, -fx*x/z^2],
         [0, fy/z, -fy*y/z^2]]

applied to the world covariance rotated into the camera frame, plus a fixed
isotropic dilation so near-degenerate footprints stay invertible.

Backward: the forward pass can retain its autograd graph; render_backward
replays it against an upstream per-pixel gradient, so the splat order is the
one fixed at forward time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .gaussians import GaussianSet, GaussianView
from .geometry import CameraPose, Intrinsics
from .torchmath import (
    DTYPE,
    invert_qt,
    perturbed_pose,
    pose_tensors,
    quat_normalize_t,
    quat_rotate_t,
    quat_to_matrix_t,
    to_tensor,
)

# contributions beyond this many standard deviations are dropped; the tail
# alpha there is o * exp(-24.5) ~ 2e-11, far below the oracle tolerance
_CULL_SIGMA = 7.0


class RenderContractError(RuntimeError):
    """Raised when render_backward inputs do not match the saved forward state."""


@dataclass
class RenderConfig:
    cov2d_dilation: float = 0.3      # px^2 added to the projected covariance diagonal
    z_near: float = 0.05             # m; splats closer than this are culled
    transmittance_floor: float = 1e-8
    contributor_min_weight: float = 0.01
    pixel_chunk: int = 2048
    use_dir_colors: bool = False     # evaluate degree-1 color terms when present


DEFAULT_CONFIG = RenderConfig()


@dataclass
class Splat2D:
    mean2d: np.ndarray      # (2,) pixel coords
    cov2d: np.ndarray       # (2, 2) with dilation included
    depth: float            # camera-frame z of the center
    opacity: float
    color: np.ndarray       # (3,) as composited (view-evaluated if degree-1)


@dataclass
class RenderedPatch:
    rgb: torch.Tensor       # (H, W, 3) in [0, 1]
    depth: torch.Tensor     # (H, W) meters, 0 where nothing rendered
    alpha: torch.Tensor     # (H, W) in [0, 1)
    roi: tuple[int, int, int, int]          # (x0, y0, w, h)
    contributors: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    ctx: dict = field(default_factory=dict, repr=False)


@dataclass
class RenderGradients:
    centers: torch.Tensor
    rotations: torch.Tensor
    scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    pose_tangent: torch.Tensor
    dir_colors: torch.Tensor | None = None


def _as_view(gaussians) -> GaussianView:
    if isinstance(gaussians, GaussianView):
        return gaussians
    if isinstance(gaussians, GaussianSet):
        return gaussians.view()
    raise TypeError(f"cannot render {type(gaussians).__name__}")


def _world_to_camera(pose: CameraPose, pose_delta: torch.Tensor | None):
    if pose_delta is None:
        q_cw, t_cw = pose_tensors(pose)
    else:
        q_cw, t_cw = perturbed_pose(pose, pose_delta)
    return invert_qt(q_cw, t_cw)  # world -> camera


def _project(view: GaussianView, q_wc, t_wc, K: Intrinsics, cfg: RenderConfig):
    """Project all splats. Returns per-splat 2D stats plus the keep mask."""
    centers_cam = quat_rotate_t(q_wc.unsqueeze(0), view.centers) + t_wc
    x, y, z = centers_cam.unbind(-1)
    keep = z > cfg.z_near
    zs = torch.where(keep, z, torch.ones_like(z))

    u = K.fx * x / zs + K.cx
    v = K.fy * y / zs + K.cy
    mean2d = torch.stack([u, v], dim=-1)

    # camera-frame covariance: (R_wc R_g) S^2 (R_wc R_g)^T
    R_wc = quat_to_matrix_t(q_wc)
    R_g = quat_to_matrix_t(quat_normalize_t(view.rotations))
    M = torch.matmul(R_wc.unsqueeze(0), R_g)                      # (N, 3, 3)

    fx_z = K.fx / zs
    fy_z = K.fy / zs
    j02 = -K.fx * x / (zs * zs)
    j12 = -K.fy * y / (zs * zs)
    # rows of J M, scaled by the per-axis standard deviations
    a = torch.stack([fx_z.unsqueeze(-1) * M[:, 0, :] + j02.unsqueeze(-1) * M[:, 2, :],
                     fy_z.unsqueeze(-1) * M[:, 1, :] + j12.unsqueeze(-1) * M[:, 2, :]], dim=1)
    asc = a * view.scales.unsqueeze(1)                            # (N, 2, 3)
    cov = torch.matmul(asc, asc.transpose(1, 2))                  # (N, 2, 2)
    caa = cov[:, 0, 0] + cfg.cov2d_dilation
    cbb = cov[:, 1, 1] + cfg.cov2d_dilation
    cab = cov[:, 0, 1]
    det = caa * cbb - cab * cab

    return dict(mean2d=mean2d, z=z, keep=keep, caa=caa, cbb=cbb, cab=cab, det=det)


def _splat_colors(view: GaussianView, cam_center, cfg: RenderConfig):
    """Per-splat composited color; degree-1 terms use the center view direction."""
    colors = view.colors
    if cfg.use_dir_colors and view.dir_colors is not None:
        d = view.centers - cam_center.unsqueeze(0)
        d = d / d.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        colors = colors + torch.einsum("ncd,nd->nc", view.dir_colors, d)
        colors = colors.clamp(0.0, 1.0)
    return colors


def project_gaussian(index: int, gaussians, pose: CameraPose, K: Intrinsics,
                     config: RenderConfig | None = None) -> Splat2D | None:
    """Project one splat of a set; None when culled (behind the near plane or
    with its footprint entirely off-image)."""
    cfg = config or DEFAULT_CONFIG
    view = _as_view(gaussians)
    q_wc, t_wc = _world_to_camera(pose, None)
    with torch.no_grad():
        proj = _project(view, q_wc, t_wc, K, cfg)
        if not bool(proj["keep"][index]):
            return None
        colors = _splat_colors(view, to_tensor(pose.t), cfg)
        mean2d = proj["mean2d"][index].numpy()
        cov2d = np.array(
            [
                [float(proj["caa"][index]), float(proj["cab"][index])],
                [float(proj["cab"][index]), float(proj["cbb"][index])],
            ]
        )
        # generous footprint test against the full image
        ext = _CULL_SIGMA * np.sqrt(max(cov2d[0, 0], cov2d[1, 1]))
        if (
            mean2d[0] + ext < 0 or mean2d[0] - ext > K.width - 1
            or mean2d[1] + ext < 0 or mean2d[1] - ext > K.height - 1
        ):
            return None
        return Splat2D(
            mean2d=mean2d,
            cov2d=cov2d,
            depth=float(proj["z"][index]),
            opacity=float(view.opacities[index]),
            color=colors[index].numpy(),
        )


def _full_roi(K: Intrinsics) -> tuple[int, int, int, int]:
    return (0, 0, K.width, K.height)


def render(gaussians, pose: CameraPose, K: Intrinsics,
           roi: tuple[int, int, int, int] | None = None, *,
           pose_delta: torch.Tensor | None = None,
           want_contributors: bool = False,
           save_graph: bool = False,
           config: RenderConfig | None = None) -> RenderedPatch:
    """Composite a Gaussian set into an image patch.

    gaussians: GaussianSet or GaussianView (tensors may carry autograd graphs).
    pose: camera-to-world. pose_delta: optional differentiable 6-tangent applied
    on the left of the pose.
    save_graph: clone all attributes into fresh leaves and retain the graph so
    render_backward can be called on the result.
    """
    cfg = config or DEFAULT_CONFIG
    view = _as_view(gaussians)
    if roi is None:
        roi = _full_roi(K)
    x0, y0, w, h = roi
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > K.width or y0 + h > K.height:
        raise ValueError(f"roi {roi} outside {K.width}x{K.height} image")

    ctx: dict = {}
    if save_graph:
        leaves = dict(
            centers=view.centers.detach().clone().requires_grad_(True),
            rotations=view.rotations.detach().clone().requires_grad_(True),
            scales=view.scales.detach().clone().requires_grad_(True),
            opacity_logits=view.opacity_logits.detach().clone().requires_grad_(True),
            colors=view.colors.detach().clone().requires_grad_(True),
        )
        dir_leaf = None
        if view.dir_colors is not None:
            dir_leaf = view.dir_colors.detach().clone().requires_grad_(True)
        pose_delta = torch.zeros(6, dtype=DTYPE, requires_grad=True) if pose_delta is None \
            else pose_delta.detach().clone().requires_grad_(True)
        view = GaussianView(dir_colors=dir_leaf, **leaves)
        ctx = dict(leaves=leaves, dir_leaf=dir_leaf, pose_delta=pose_delta, graph=True)

    n = len(view)
    if n == 0:
        zero = torch.zeros((h, w), dtype=DTYPE)
        contrib = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)) \
            if want_contributors else None
        return RenderedPatch(torch.zeros((h, w, 3), dtype=DTYPE), zero, zero.clone(),
                             roi, contrib, ctx)

    q_wc, t_wc = _world_to_camera(pose, pose_delta)
    proj = _project(view, q_wc, t_wc, K, cfg)
    cam_center = invert_qt(q_wc, t_wc)[1]
    colors = _splat_colors(view, cam_center, cfg)

    # roi-level cull: keep splats in front of the near plane whose footprint
    # can reach the roi
    with torch.no_grad():
        sig_u = torch.sqrt(proj["caa"].detach())
        sig_v = torch.sqrt(proj["cbb"].detach())
        m = proj["mean2d"].detach()
        inside = (
            proj["keep"]
            & (m[:, 0] + _CULL_SIGMA * sig_u >= x0)
            & (m[:, 0] - _CULL_SIGMA * sig_u <= x0 + w - 1)
            & (m[:, 1] + _CULL_SIGMA * sig_v >= y0)
            & (m[:, 1] - _CULL_SIGMA * sig_v <= y0 + h - 1)
        )
        kept_idx = torch.nonzero(inside, as_tuple=False).squeeze(-1)

    if kept_idx.numel() == 0:
        zero = torch.zeros((h, w), dtype=DTYPE)
        contrib = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)) \
            if want_contributors else None
        return RenderedPatch(torch.zeros((h, w, 3), dtype=DTYPE), zero, zero.clone(),
                             roi, contrib, ctx)

    # front-to-back order shared by every pixel: center depth, index tie-break
    with torch.no_grad():
        z_kept = proj["z"].detach()[kept_idx]
        order = torch.argsort(z_kept, stable=True)
        sorted_idx = kept_idx[order]

    mean2d = proj["mean2d"][sorted_idx]
    caa = proj["caa"][sorted_idx]
    cbb = proj["cbb"][sorted_idx]
    cab = proj["cab"][sorted_idx]
    det = proj["det"][sorted_idx]
    zvals = proj["z"][sorted_idx]
    opac = view.opacities[sorted_idx]
    cols = colors[sorted_idx]

    with torch.no_grad():
        mu_np = mean2d.detach()
        su = _CULL_SIGMA * torch.sqrt(caa.detach())
        sv = _CULL_SIGMA * torch.sqrt(cbb.detach())

    rows = torch.arange(y0, y0 + h, dtype=DTYPE)
    cols_u = torch.arange(x0, x0 + w, dtype=DTYPE)

    rgb_chunks, depth_chunks, alpha_chunks = [], [], []
    contrib_pix, contrib_gid, contrib_w = [], [], []

    rows_per_chunk = max(1, cfg.pixel_chunk // w)
    for r0 in range(0, h, rows_per_chunk):
        r1 = min(h, r0 + rows_per_chunk)
        # row-band cull for this chunk
        with torch.no_grad():
            band = (mu_np[:, 1] + sv >= y0 + r0) & (mu_np[:, 1] - sv <= y0 + r1 - 1)
            bidx = torch.nonzero(band, as_tuple=False).squeeze(-1)
        hh = r1 - r0
        if bidx.numel() == 0:
            rgb_chunks.append(torch.zeros((hh * w, 3), dtype=DTYPE))
            depth_chunks.append(torch.zeros(hh * w, dtype=DTYPE))
            alpha_chunks.append(torch.zeros(hh * w, dtype=DTYPE))
            continue

        pv = rows[r0:r1].reshape(-1, 1).expand(hh, w).reshape(-1)   # (P,)
        pu = cols_u.reshape(1, -1).expand(hh, w).reshape(-1)

        du = pu.unsqueeze(1) - mean2d[bidx, 0].unsqueeze(0)         # (P, Nb)
        dv = pv.unsqueeze(1) - mean2d[bidx, 1].unsqueeze(0)
        quad = (
            cbb[bidx].unsqueeze(0) * du * du
            - 2.0 * cab[bidx].unsqueeze(0) * du * dv
            + caa[bidx].unsqueeze(0) * dv * dv
        ) / det[bidx].unsqueeze(0)
        alpha = opac[bidx].unsqueeze(0) * torch.exp(-0.5 * quad)

        trans = torch.cumprod(1.0 - alpha, dim=1)
        trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
        live = (trans >= cfg.transmittance_floor).to(alpha.dtype)
        weight = alpha * trans * live

        rgb_chunks.append(weight @ cols[bidx])
        depth_chunks.append(weight @ zvals[bidx])
        alpha_chunks.append(weight.sum(dim=1))

        if want_contributors:
            with torch.no_grad():
                wd = weight.detach()
                sel = wd >= cfg.contributor_min_weight
                pj, gj = torch.nonzero(sel, as_tuple=True)
                base = r0 * w
                contrib_pix.append((pj + base).numpy())
                contrib_gid.append(sorted_idx[bidx][gj].numpy())
                contrib_w.append(wd[pj, gj].numpy())

    rgb = torch.cat(rgb_chunks).reshape(h, w, 3)
    depth = torch.cat(depth_chunks).reshape(h, w)
    alpha_img = torch.cat(alpha_chunks).reshape(h, w)

    contributors = None
    if want_contributors:
        contributors = (
            np.concatenate(contrib_pix) if contrib_pix else np.zeros(0, np.int64),
            np.concatenate(contrib_gid) if contrib_gid else np.zeros(0, np.int64),
            np.concatenate(contrib_w) if contrib_w else np.zeros(0),
        )
    return RenderedPatch(rgb, depth, alpha_img, roi, contributors, ctx)


def render_backward(patch: RenderedPatch, patch_gradient) -> RenderGradients:
    """Pull an upstream per-pixel gradient back to splat attributes and pose.

    patch_gradient: (H, W, 4) array or tensor, channels (d/drgb * 3, d/ddepth).
    The patch must come from render(..., save_graph=True); the splat order is
    the one fixed during that forward pass.
    """
    if not patch.ctx.get("graph"):
        raise RenderContractError("patch was not rendered with save_graph=True")
    x0, y0, w, h = patch.roi
    g = to_tensor(patch_gradient)
    if g.shape != (h, w, 4):
        raise RenderContractError(
            f"patch gradient shape {tuple(g.shape)} does not match roi {patch.roi}"
        )
    leaves = patch.ctx["leaves"]
    dir_leaf = patch.ctx["dir_leaf"]
    pose_delta = patch.ctx["pose_delta"]
    inputs = [leaves["centers"], leaves["rotations"], leaves["scales"],
              leaves["opacity_logits"], leaves["colors"], pose_delta]
    if dir_leaf is not None:
        inputs.append(dir_leaf)
    grads = torch.autograd.grad(
        outputs=[patch.rgb, patch.depth],
        inputs=inputs,
        grad_outputs=[g[..., :3], g[..., 3]],
        retain_graph=True,
        allow_unused=True,
    )
    grads = [torch.zeros_like(i) if gi is None else gi for i, gi in zip(inputs, grads)]
    return RenderGradients(
        centers=grads[0], rotations=grads[1], scales=grads[2],
        opacity_logits=grads[3], colors=grads[4], pose_tangent=grads[5],
        dir_colors=grads[6] if dir_leaf is not None else None,
    )


def blend_weights(patch: RenderedPatch, pixel) -> list[tuple[int, float]]:
    """Per-splat blending weights at one roi pixel, heaviest first.

    pixel is (u, v) in image coordinates. Only weights at or above the
    contributor threshold were recorded.
    """
    if patch.contributors is None:
        raise RenderContractError("patch was rendered without contributor recording")
    x0, y0, w, h = patch.roi
    u, v = int(pixel[0]), int(pixel[1])
    if not (x0 <= u < x0 + w and y0 <= v < y0 + h):
        raise ValueError(f"pixel {(u, v)} outside roi {patch.roi}")
    flat = (v - y0) * w + (u - x0)
    pix, gid, wts = patch.contributors
    sel = pix == flat
    pairs = sorted(zip(gid[sel].tolist(), wts[sel].tolist()), key=lambda p: -p[1])
    return [(int(i), float(x)) for i, x in pairs]


def save_patch_images(patch: RenderedPatch, rgb_path, depth_path, depth_scale: float = 5000.0):
    """Debug dump: 8-bit color PNG plus 16-bit scaled depth PNG."""
    from PIL import Image

    rgb = (patch.rgb.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(rgb).save(rgb_path)
    d = (patch.depth.detach().numpy() * depth_scale).round()
    d = np.clip(d, 0, 65535).astype(np.uint16)
    Image.fromarray(d).save(depth_path)
