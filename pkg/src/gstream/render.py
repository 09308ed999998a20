"""Desk-scale differentiable Gaussian splatting.

Projection is first-order EWA (cov2d = J W cov W^T J^T plus a low-pass
floor), depth sorting is global per view with index tie-break, and
compositing is front-to-back alpha blending with early termination once
transmittance drops below a floor. Everything runs through torch autograd,
so `backward` returns analytic gradients for every Gaussian attribute plus
the per-Gaussian viewspace (projected 2D position) gradient that keypoint
selection consumes.

No tiling, no GPU kernels: scenes here are a few thousand Gaussians at
most and determinism matters more than throughput.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor

from .core import Camera, SceneState, eval_sh, quat_normalize, quat_to_rotmat


@dataclass
class RenderConfig:
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01
    lowpass: float = 0.3            # px^2 added to cov2d diagonal
    alpha_max: float = 0.99
    transmittance_min: float = 1e-4  # stop compositing below this
    cull_sigma: float = 3.0          # cull when center misses image by > 3 sigma


DEFAULT_CONFIG = RenderConfig()


@dataclass
class Splat2D:
    mean2d: Tensor      # (2,) pixel coords
    cov2d: Tensor       # (2, 2) SPD, px^2
    depth: float        # camera-space z
    color: Tensor       # (3,)
    alpha_base: float


@dataclass
class AttributeGradients:
    mu: Tensor              # [N, 3]
    q: Tensor               # [N, 4]
    log_s: Tensor           # [N, 3]
    logit_sigma: Tensor     # [N]
    sh: Tensor              # [N, 4, 3]
    viewspace: Tensor       # [N, 2] d(loss)/d(mean2d) for this view


@dataclass
class RenderOutput:
    image: Tensor                                   # [H, W, 3], detached
    per_gaussian_viewspace_grad_slot: Optional[Tensor] = None  # filled by backward
    _ctx: Optional[dict] = field(default=None, repr=False)


class RenderError(RuntimeError):
    pass


_GRID_CACHE: dict = {}


def _pixel_grid(height: int, width: int, dtype) -> Tensor:
    key = (height, width, dtype)
    if key not in _GRID_CACHE:
        ys = torch.arange(height, dtype=dtype) + 0.5
        xs = torch.arange(width, dtype=dtype) + 0.5
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        _GRID_CACHE[key] = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
    return _GRID_CACHE[key]


def _project_batch(mu, q, log_s, cam: Camera, cfg: RenderConfig, mean2d_offset=None):
    """Project all Gaussians into one view.

    Returns (mean2d [N,2], cov2d [N,2,2], depth [N], visible [N] bool).
    `mean2d_offset` is an optional [N,2] additive slot used to expose the
    viewspace position as a differentiable input (zeros in normal use).
    """
    dtype = mu.dtype
    R = cam.R.to(dtype)
    t = cam.t.to(dtype)
    p_cam = mu @ R.T + t
    x, y, z = p_cam.unbind(-1)
    in_front = z > cfg.near
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    inv_z = 1.0 / z_safe

    mean2d = torch.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], dim=-1)
    if mean2d_offset is not None:
        mean2d = mean2d + mean2d_offset

    # Jacobian of the perspective projection at the Gaussian center
    zeros = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([cam.fx * inv_z, zeros, -cam.fx * x * inv_z * inv_z], dim=-1),
            torch.stack([zeros, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], dim=-1),
        ],
        dim=-2,
    )  # [N, 2, 3]
    Rq = quat_to_rotmat(quat_normalize(q))
    s = torch.exp(log_s)
    M = J @ R.unsqueeze(0) @ Rq * s.unsqueeze(-2)  # J W R_q S, [N, 2, 3]
    cov2d = M @ M.transpose(-1, -2)
    cov2d = cov2d + cfg.lowpass * torch.eye(2, dtype=dtype)

    # frustum test on the detached footprint; culling is a hard gate, not a gradient path
    with torch.no_grad():
        a = cov2d[:, 0, 0]
        c = cov2d[:, 1, 1]
        b = cov2d[:, 0, 1]
        lam_max = 0.5 * (a + c) + torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0))
        radius = cfg.cull_sigma * torch.sqrt(lam_max)
        mx, my = mean2d[:, 0], mean2d[:, 1]
        inside = (mx + radius >= 0) & (mx - radius <= cam.width) & (my + radius >= 0) & (my - radius <= cam.height)
    visible = in_front & inside
    return mean2d, cov2d, z, visible


def project_gaussian(point, cam: Camera, cfg: RenderConfig = DEFAULT_CONFIG) -> Optional[Splat2D]:
    """Project a single Gaussian; returns None when culled."""
    mu = point.mu.reshape(1, 3)
    q = point.q.reshape(1, 4)
    log_s = torch.log(point.s).reshape(1, 3)
    mean2d, cov2d, depth, visible = _project_batch(mu, q, log_s, cam, cfg)
    if not bool(visible[0]):
        return None
    view_dir = point.mu - cam.center.to(point.mu.dtype)
    view_dir = view_dir / torch.linalg.norm(view_dir)
    color = eval_sh(point.sh, view_dir)
    return Splat2D(
        mean2d=mean2d[0].detach(),
        cov2d=cov2d[0].detach(),
        depth=float(depth[0]),
        color=color.detach(),
        alpha_base=point.sigma,
    )


def _composite(mean2d, cov2d, depth, visible, colors, alpha_base, cam: Camera, cfg: RenderConfig) -> Tensor:
    """Alpha-composite one view; fully vectorized over pixels x splats."""
    dtype = mean2d.dtype
    H, W = cam.height, cam.width
    bg = torch.as_tensor(cfg.background, dtype=dtype)
    idx = torch.nonzero(visible, as_tuple=False).reshape(-1)
    if idx.numel() == 0:
        return bg.expand(H, W, 3).clone()

    # ascending depth, ties broken by ascending Gaussian index (stable sort)
    order = torch.argsort(depth[idx].detach(), stable=True)
    idx = idx[order]

    grid = _pixel_grid(H, W, dtype)                     # [P, 2]
    d = grid.unsqueeze(1) - mean2d[idx].unsqueeze(0)    # [P, M, 2]
    cov = cov2d[idx]
    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    det = a * c - b * b
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    power = torch.clamp(power, max=0.0)
    alpha = torch.clamp(alpha_base[idx].unsqueeze(0) * torch.exp(power), max=cfg.alpha_max)  # [P, M]

    trans = torch.cumprod(1.0 - alpha, dim=1)
    t_before = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)  # T before splat i
    active = (t_before >= cfg.transmittance_min).to(dtype) if cfg.transmittance_min > 0 else torch.ones_like(t_before)
    weight = alpha * t_before * active
    # actives form a prefix of the depth order, so this product is T at termination
    t_bg = torch.prod(1.0 - alpha * active, dim=1)

    img = weight @ colors[idx] + t_bg.unsqueeze(-1) * bg
    return img.reshape(H, W, 3)


def _render_tensors(mu, q, log_s, logit_sigma, sh, cam: Camera, cfg: RenderConfig, mean2d_offset=None) -> tuple:
    """Differentiable forward on raw attribute tensors. Returns (image, mean2d)."""
    mean2d, cov2d, depth, visible = _project_batch(mu, q, log_s, cam, cfg, mean2d_offset)
    view_dir = mu - cam.center.to(mu.dtype)
    view_dir = view_dir / torch.linalg.norm(view_dir, dim=-1, keepdim=True).clamp_min(1e-12)
    colors = eval_sh(sh, view_dir)
    alpha_base = torch.sigmoid(logit_sigma)
    image = _composite(mean2d, cov2d, depth, visible, colors, alpha_base, cam, cfg)
    return image, mean2d


def render_view(scene: SceneState, cam: Camera, cfg: RenderConfig = DEFAULT_CONFIG) -> RenderOutput:
    """Render one view; keeps the autograd graph so `backward` can run later."""
    for name, t in scene.tensors().items():
        if not torch.isfinite(t).all():
            bad = torch.nonzero(~torch.isfinite(t).reshape(t.shape[0], -1).all(dim=1)).reshape(-1)
            raise RenderError(f"non-finite attribute '{name}' at Gaussian index {int(bad[0])}")
    leaves = {k: t.detach().clone().requires_grad_(True) for k, t in scene.tensors().items()}
    offset = torch.zeros(scene.n_points, 2, dtype=scene.dtype, requires_grad=True)
    image, _ = _render_tensors(
        leaves["mu"], leaves["q"], leaves["log_s"], leaves["logit_sigma"], leaves["sh"], cam, cfg, offset
    )
    return RenderOutput(image=image.detach(), _ctx={"leaves": leaves, "offset": offset, "image": image})


def backward(out: RenderOutput, dloss_dimage: Tensor) -> AttributeGradients:
    """Pull a cotangent on the image back to all attributes and the viewspace slot.

    Must follow a `render_view` on the same output object; may be called
    several times (the graph is retained).
    """
    if out._ctx is None:
        raise RenderError("backward called without a matching forward render")
    ctx = out._ctx
    leaves = ctx["leaves"]
    inputs = [leaves["mu"], leaves["q"], leaves["log_s"], leaves["logit_sigma"], leaves["sh"], ctx["offset"]]
    grads = torch.autograd.grad(
        ctx["image"],
        inputs,
        grad_outputs=dloss_dimage.to(ctx["image"].dtype),
        retain_graph=True,
        allow_unused=True,
    )
    grads = [g if g is not None else torch.zeros_like(i) for g, i in zip(grads, inputs)]
    out.per_gaussian_viewspace_grad_slot = grads[5]
    return AttributeGradients(
        mu=grads[0], q=grads[1], log_s=grads[2], logit_sigma=grads[3], sh=grads[4], viewspace=grads[5]
    )


# --- reconstruction loss: 0.8 L1 + 0.2 D-SSIM --------------------------------

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LAMBDA_DSSIM = 0.2

_KERNEL_CACHE: dict = {}


def _ssim_kernel(dtype) -> Tensor:
    if dtype not in _KERNEL_CACHE:
        half = SSIM_WIN // 2
        xs = torch.arange(SSIM_WIN, dtype=torch.float64) - half
        g = torch.exp(-(xs ** 2) / (2 * SSIM_SIGMA ** 2))
        g = g / g.sum()
        k = torch.outer(g, g)
        _KERNEL_CACHE[dtype] = k.to(dtype).reshape(1, 1, SSIM_WIN, SSIM_WIN).repeat(3, 1, 1, 1)
    return _KERNEL_CACHE[dtype]


def ssim(img_a: Tensor, img_b: Tensor) -> Tensor:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), channels averaged."""
    a = img_a.permute(2, 0, 1).unsqueeze(0)
    b = img_b.permute(2, 0, 1).unsqueeze(0)
    k = _ssim_kernel(img_a.dtype)
    conv = lambda x: torch.nn.functional.conv2d(x, k, groups=3)
    mu_a = conv(a)
    mu_b = conv(b)
    var_a = conv(a * a) - mu_a * mu_a
    var_b = conv(b * b) - mu_b * mu_b
    cov = conv(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def recon_loss_t(rendered: Tensor, gt: Tensor) -> Tensor:
    """Graph-friendly reconstruction loss tensor."""
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(gt.shape)}")
    l1 = (rendered - gt).abs().mean()
    dssim = (1.0 - ssim(rendered, gt)) / 2.0
    return (1.0 - LAMBDA_DSSIM) * l1 + LAMBDA_DSSIM * dssim


def recon_loss(rendered: Tensor, gt: Tensor):
    """Loss value plus its gradient with respect to the rendered image."""
    r = rendered.detach().clone().requires_grad_(True)
    loss = recon_loss_t(r, gt.detach())
    (grad,) = torch.autograd.grad(loss, r)
    return float(loss.detach()), grad
