"""Shared scene builders and independent reference implementations.

The reference renderer here is deliberately scalar/numpy and written from
the math, not from the package's tensor code: per-Gaussian explicit
projection, per-pixel sequential front-to-back compositing with early
termination. Tests compare the fast path against it.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from gstream.core import Camera, SceneState
from gstream.render import RenderConfig, backward, recon_loss, recon_loss_t, render_view, _render_tensors


def rand_unit_quat(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def rand_scene(
    rng: np.random.Generator,
    n: int,
    dtype=torch.float32,
    spread: float = 0.8,
    opacity_range=(0.2, 0.7),
    sh_dc_range=(-1.0, 1.0),
    sh_rest_range=(-0.25, 0.25),
    scale_range=(0.05, 0.18),
) -> SceneState:
    """Scene tuned so gradients are informative: moderate opacity, no SH clamp
    saturation, spread-out positions."""
    mu = rng.uniform(-spread, spread, size=(n, 3))
    q = rand_unit_quat(rng, n)
    log_s = rng.uniform(math.log(scale_range[0]), math.log(scale_range[1]), size=(n, 3))
    sigma = rng.uniform(*opacity_range, size=n)
    sh = np.zeros((n, 4, 3))
    sh[:, 0, :] = rng.uniform(*sh_dc_range, size=(n, 3))
    sh[:, 1:, :] = rng.uniform(*sh_rest_range, size=(n, 3, 3))
    logit = np.log(sigma) - np.log1p(-sigma)
    return SceneState(
        mu=torch.tensor(mu, dtype=dtype),
        q=torch.tensor(q, dtype=dtype),
        log_s=torch.tensor(log_s, dtype=dtype),
        logit_sigma=torch.tensor(logit, dtype=dtype),
        sh=torch.tensor(sh, dtype=dtype),
        timestep=0,
    )


def rand_camera(rng: np.random.Generator, size: int = 16, distance_range=(2.2, 3.4)) -> Camera:
    d = rng.uniform(*distance_range)
    theta = rng.uniform(0.0, 2 * math.pi)
    height = rng.uniform(-0.6, 1.2)
    eye = (d * math.cos(theta), d * math.sin(theta), height)
    f = float(size)
    return Camera.look_at(eye=eye, target=(0.0, 0.0, 0.0), fx=f, fy=f, width=size, height=size)


# --- independent reference implementations ------------------------------------------

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def ref_quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def ref_color(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    d = view_dir / np.linalg.norm(view_dir)
    c = SH_C0 * sh[0] - SH_C1 * d[1] * sh[1] + SH_C1 * d[2] * sh[2] - SH_C1 * d[0] * sh[3]
    return np.clip(c + 0.5, 0.0, 1.0)


def ref_render(scene: SceneState, cam: Camera, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Scalar per-pixel front-to-back compositing, float64 throughout."""
    n = scene.n_points
    R = cam.R.numpy().astype(np.float64)
    t = cam.t.numpy().astype(np.float64)
    cam_center = -R.T @ t
    mu = scene.mu.numpy().astype(np.float64)
    q = scene.q.numpy().astype(np.float64)
    s = np.exp(scene.log_s.numpy().astype(np.float64))
    sigma = 1.0 / (1.0 + np.exp(-scene.logit_sigma.numpy().astype(np.float64)))
    sh = scene.sh.numpy().astype(np.float64)

    splats = []
    for i in range(n):
        p = R @ mu[i] + t
        if p[2] <= cfg.near:
            continue
        x, y, z = p
        mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        J = np.array(
            [
                [cam.fx / z, 0.0, -cam.fx * x / z**2],
                [0.0, cam.fy / z, -cam.fy * y / z**2],
            ]
        )
        Rq = ref_quat_to_rotmat(q[i])
        cov3d = Rq @ np.diag(s[i] ** 2) @ Rq.T
        cov2d = J @ R @ cov3d @ R.T @ J.T + cfg.lowpass * np.eye(2)
        # cull exactly like the fast path
        a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
        lam = 0.5 * (a + c) + math.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
        r = cfg.cull_sigma * math.sqrt(lam)
        if mean2d[0] + r < 0 or mean2d[0] - r > cam.width or mean2d[1] + r < 0 or mean2d[1] - r > cam.height:
            continue
        view_dir = mu[i] - cam_center
        splats.append((z, i, mean2d, cov2d, ref_color(sh[i], view_dir), sigma[i]))

    splats.sort(key=lambda rec: (rec[0], rec[1]))
    H, W = cam.height, cam.width
    bg = np.asarray(cfg.background, dtype=np.float64)
    img = np.zeros((H, W, 3))
    for py in range(H):
        for px in range(W):
            pos = np.array([px + 0.5, py + 0.5])
            color = np.zeros(3)
            trans = 1.0
            for _, _, mean2d, cov2d, col, sg in splats:
                if trans < cfg.transmittance_min:
                    break
                d = pos - mean2d
                det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] ** 2
                power = -0.5 * (cov2d[1, 1] * d[0] ** 2 - 2 * cov2d[0, 1] * d[0] * d[1] + cov2d[0, 0] * d[1] ** 2) / det
                alpha = min(sg * math.exp(min(power, 0.0)), cfg.alpha_max)
                color += alpha * trans * col
                trans *= 1.0 - alpha
            img[py, px] = color + trans * bg
    return img


# --- finite-difference gradient checking ----------------------------------------------

GRAD_FIELDS = ("mu", "q", "log_s", "logit_sigma", "sh")


def fd_targets(rng: np.random.Generator, scene: SceneState, cams, cfg: RenderConfig):
    """Ground-truth images offset from the current render by at least 0.05 per
    pixel, so no |rendered - gt| term sits near the L1 kink during FD probes."""
    gts = []
    with torch.no_grad():
        for cam in cams:
            img = render_view(scene, cam, cfg).image
            mag = rng.uniform(0.05, 0.2, size=img.shape)
            sign = rng.choice([-1.0, 1.0], size=img.shape)
            gts.append(img + torch.tensor(mag * sign, dtype=img.dtype))
    return gts


def multiview_loss(tensors: dict, cams, gts, cfg: RenderConfig, offsets=None) -> torch.Tensor:
    total = None
    for v, cam in enumerate(cams):
        off = None if offsets is None else offsets[v]
        img, _ = _render_tensors(
            tensors["mu"], tensors["q"], tensors["log_s"], tensors["logit_sigma"], tensors["sh"],
            cam, cfg, mean2d_offset=off,
        )
        term = recon_loss_t(img, gts[v])
        total = term if total is None else total + term
    return total


def analytic_gradients(scene: SceneState, cams, gts, cfg: RenderConfig):
    """Attribute grads of the summed multi-view loss via the public
    render/backward pair, plus each view's own viewspace grads."""
    sums = {name: torch.zeros_like(getattr(scene, name)) for name in GRAD_FIELDS}
    viewspace = []
    for cam, gt in zip(cams, gts):
        out = render_view(scene, cam, cfg)
        _, dimg = recon_loss(out.image, gt)
        g = backward(out, dimg)
        for name in GRAD_FIELDS:
            sums[name] += getattr(g, name)
        viewspace.append(g.viewspace.clone())
    return sums, viewspace


def fd_attribute_gradients(scene: SceneState, cams, gts, cfg: RenderConfig, eps: float = 1e-5):
    """Central differences of the summed multi-view loss, element by element."""
    base = {k: t.detach().clone() for k, t in scene.tensors().items()}
    grads = {}
    with torch.no_grad():
        for name in GRAD_FIELDS:
            flat = base[name].reshape(-1)
            g = torch.zeros_like(flat)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + eps
                hi = float(multiview_loss(base, cams, gts, cfg))
                flat[j] = orig - eps
                lo = float(multiview_loss(base, cams, gts, cfg))
                flat[j] = orig
                g[j] = (hi - lo) / (2 * eps)
            grads[name] = g.reshape(base[name].shape)
    return grads


def fd_viewspace_gradients(scene: SceneState, cams, gts, cfg: RenderConfig, eps: float = 1e-4):
    """Central differences over the per-view pixel-space offset slot; each view's
    loss is probed alone since the offset cannot affect other views."""
    base = {k: t.detach().clone() for k, t in scene.tensors().items()}
    out = []
    with torch.no_grad():
        for v, cam in enumerate(cams):
            off = torch.zeros(scene.n_points, 2, dtype=scene.dtype)
            flat = off.reshape(-1)
            g = torch.zeros_like(flat)
            for j in range(flat.numel()):
                flat[j] = eps
                hi = float(multiview_loss(base, [cam], [gts[v]], cfg, offsets=[off]))
                flat[j] = -eps
                lo = float(multiview_loss(base, [cam], [gts[v]], cfg, offsets=[off]))
                flat[j] = 0.0
                g[j] = (hi - lo) / (2 * eps)
            out.append(g.reshape(off.shape))
    return out


def assert_grads_close(analytic: torch.Tensor, fd: torch.Tensor, rel: float = 1e-3,
                       abs_floor: float = 1e-6, label: str = ""):
    a = analytic.detach().to(torch.float64).reshape(-1)
    b = fd.detach().to(torch.float64).reshape(-1)
    err = (a - b).abs()
    tol = abs_floor + rel * torch.maximum(a.abs(), b.abs())
    bad = err > tol
    if bool(bad.any()):
        j = int(torch.argmax(err - tol))
        raise AssertionError(
            f"{label} gradient mismatch at flat index {j}: analytic={float(a[j]):.8g} "
            f"fd={float(b[j]):.8g} err={float(err[j]):.3g} tol={float(tol[j]):.3g}"
        )
