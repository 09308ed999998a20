"""Gaussian primitive math: covariances, quaternions, degree-1 SH color.

Conventions used everywhere in this package:
  * quaternions are (w, x, y, z), renormalized on read
  * scales are stored as log-scale, opacity as a logit, so optimization is
    unconstrained and decoded values are valid by construction
  * SH color is 0.5 + basis expansion, clamped to [0, 1]; degree 1 only
    (4 coefficients per channel, coefficient-major layout [4, 3])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

# real SH basis constants, degree 0 and 1
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

EPS_NORM = 1e-12


def _as_tensor(x, dtype=torch.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(x, dtype=dtype)


def _check_finite(name: str, t: Tensor):
    if not torch.isfinite(t).all():
        raise ValueError(f"non-finite values in {name}")


def quat_normalize(q: Tensor) -> Tensor:
    """Unit-normalize quaternion(s), last dim 4. Raises on ~zero norm."""
    n = torch.linalg.norm(q, dim=-1, keepdim=True)
    if (n < EPS_NORM).any():
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Rotation matrix from unit quaternion (w, x, y, z). Batched over leading dims."""
    w, x, y, z = q.unbind(-1)
    two = 2.0
    row0 = torch.stack([1 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)], dim=-1)
    row1 = torch.stack([two * (x * y + w * z), 1 - two * (x * x + z * z), two * (y * z - w * x)], dim=-1)
    row2 = torch.stack([two * (x * z - w * y), two * (y * z + w * x), 1 - two * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_compose(a, b) -> Tensor:
    """Hamilton product a*b, renormalized. (w, x, y, z) order.

    Supports broadcasting over leading dims. Raises if the product has
    near-zero norm (only possible for non-unit inputs).
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    _check_finite("quaternion", a)
    _check_finite("quaternion", b)
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    w = aw * bw - ax * bx - ay * by - az * bz
    x = aw * bx + ax * bw + ay * bz - az * by
    y = aw * by - ax * bz + ay * bw + az * bx
    z = aw * bz + ax * by - ay * bx + az * bw
    return quat_normalize(torch.stack([w, x, y, z], dim=-1))


def quat_raw_compose(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product without normalization (internal, keeps zero-grads exact)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_from_axis_angle(axis, angle_rad: float, dtype=torch.float32) -> Tensor:
    axis = _as_tensor(axis, dtype)
    axis = axis / torch.linalg.norm(axis)
    half = angle_rad / 2.0
    return torch.cat([torch.tensor([math.cos(half)], dtype=dtype), math.sin(half) * axis])


def quat_identity(dtype=torch.float32) -> Tensor:
    return torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype)


def build_covariance(q, s) -> Tensor:
    """3x3 covariance R diag(s^2) R^T from unit quaternion q and positive scales s.

    Batched over leading dims. Rejects non-finite input, non-unit q and
    non-positive scales.
    """
    q = _as_tensor(q)
    s = _as_tensor(s)
    _check_finite("quaternion", q)
    _check_finite("scale", s)
    if (s <= 0).any():
        raise ValueError("scales must be positive")
    n = torch.linalg.norm(q, dim=-1)
    if ((n - 1.0).abs() > 1e-5).any():
        raise ValueError("quaternion must be unit length")
    R = quat_to_rotmat(q)
    S2 = torch.diag_embed(s * s)
    return R @ S2 @ R.transpose(-1, -2)


def build_precision(q: Tensor, log_s: Tensor) -> Tensor:
    """Inverse covariance R diag(exp(-2 log_s)) R^T; analytic, autograd-friendly."""
    R = quat_to_rotmat(quat_normalize(q))
    inv_s2 = torch.exp(-2.0 * log_s)
    return R @ torch.diag_embed(inv_s2) @ R.transpose(-1, -2)


def eval_gaussian(x, mu, cov) -> Tensor:
    """exp(-1/2 (x-mu)^T cov^-1 (x-mu)); 1 at x == mu. cov must be SPD."""
    x = _as_tensor(x)
    mu = _as_tensor(mu)
    cov = _as_tensor(cov)
    for name, t in (("x", x), ("mu", mu), ("cov", cov)):
        _check_finite(name, t)
    d = (x - mu).unsqueeze(-1)
    try:
        torch.linalg.cholesky(cov)
    except Exception as exc:
        raise ValueError("covariance is not positive definite") from exc
    sol = torch.linalg.solve(cov, d)
    m = (d * sol).sum(dim=(-2, -1))
    out = torch.exp(-0.5 * m)
    return out if out.ndim else out.reshape(())


def eval_sh(sh, view_dir) -> Tensor:
    """Degree-1 SH color for unit view direction(s).

    sh: [..., 4, 3] coefficient-major (DC, then m = -1, 0, +1).
    Returns rgb in [0, 1]; the clamp zeroes gradients at saturation.
    """
    sh = _as_tensor(sh)
    view_dir = _as_tensor(view_dir)
    _check_finite("sh", sh)
    _check_finite("view_dir", view_dir)
    x, y, z = view_dir.unbind(-1)
    c = SH_C0 * sh[..., 0, :]
    c = c - SH_C1 * y.unsqueeze(-1) * sh[..., 1, :]
    c = c + SH_C1 * z.unsqueeze(-1) * sh[..., 2, :]
    c = c - SH_C1 * x.unsqueeze(-1) * sh[..., 3, :]
    return torch.clamp(c + 0.5, 0.0, 1.0)


def logit(p) -> Tensor:
    p = _as_tensor(p)
    return torch.log(p) - torch.log1p(-p)


def inv_logit(v) -> Tensor:
    return torch.sigmoid(_as_tensor(v))


@dataclass
class GaussianPoint:
    """One scene primitive in read (constrained) space."""

    mu: Tensor          # (3,) world position
    q: Tensor           # (4,) unit quaternion, (w, x, y, z)
    s: Tensor           # (3,) positive scales, world units
    sigma: float        # opacity in [0, 1]
    sh: Tensor          # (4, 3) SH coefficients

    def __post_init__(self):
        self.mu = _as_tensor(self.mu).reshape(3)
        self.q = quat_normalize(_as_tensor(self.q).reshape(4))
        self.s = _as_tensor(self.s).reshape(3)
        if (self.s <= 0).any():
            raise ValueError("scales must be positive")
        self.sigma = float(self.sigma)
        if not (0.0 <= self.sigma <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")
        self.sh = _as_tensor(self.sh).reshape(4, 3)


@dataclass
class SceneState:
    """Ordered Gaussian set, structure-of-arrays; index order is stable stream-wide.

    Stored parameterization: log-scale and logit-opacity. Point count is
    constant across all frames after frame 0.
    """

    mu: Tensor                      # [N, 3]
    q: Tensor                       # [N, 4] raw, normalized on read
    log_s: Tensor                   # [N, 3]
    logit_sigma: Tensor             # [N]
    sh: Tensor                      # [N, 4, 3]
    timestep: int = 0

    @property
    def n_points(self) -> int:
        return self.mu.shape[0]

    @property
    def dtype(self):
        return self.mu.dtype

    def rotations(self) -> Tensor:
        return quat_normalize(self.q)

    def scales(self) -> Tensor:
        return torch.exp(self.log_s)

    def sigmas(self) -> Tensor:
        return torch.sigmoid(self.logit_sigma)

    def point(self, i: int) -> GaussianPoint:
        return GaussianPoint(
            mu=self.mu[i],
            q=self.rotations()[i],
            s=self.scales()[i],
            sigma=float(self.sigmas()[i]),
            sh=self.sh[i],
        )

    def clone(self) -> "SceneState":
        return SceneState(
            mu=self.mu.clone(),
            q=self.q.clone(),
            log_s=self.log_s.clone(),
            logit_sigma=self.logit_sigma.clone(),
            sh=self.sh.clone(),
            timestep=self.timestep,
        )

    def to(self, dtype) -> "SceneState":
        return SceneState(
            mu=self.mu.to(dtype),
            q=self.q.to(dtype),
            log_s=self.log_s.to(dtype),
            logit_sigma=self.logit_sigma.to(dtype),
            sh=self.sh.to(dtype),
            timestep=self.timestep,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "mu": self.mu,
            "q": self.q,
            "log_s": self.log_s,
            "logit_sigma": self.logit_sigma,
            "sh": self.sh,
        }

    def equal(self, other: "SceneState") -> bool:
        return all(torch.equal(a, b) for a, b in zip(self.tensors().values(), other.tensors().values()))

    @staticmethod
    def from_points(points: list[GaussianPoint], timestep: int = 0, dtype=torch.float32) -> "SceneState":
        mu = torch.stack([p.mu for p in points]).to(dtype)
        q = torch.stack([p.q for p in points]).to(dtype)
        log_s = torch.log(torch.stack([p.s for p in points])).to(dtype)
        sig = torch.tensor([p.sigma for p in points], dtype=torch.float64).clamp(1e-7, 1 - 1e-7)
        logit_sigma = logit(sig).to(dtype)
        sh = torch.stack([p.sh for p in points]).to(dtype)
        return SceneState(mu, q, log_s, logit_sigma, sh, timestep)

    @staticmethod
    def from_read_values(mu, q, s, sigma, sh, timestep: int = 0, dtype=torch.float32) -> "SceneState":
        """Build from constrained-space arrays (positive s, sigma in (0,1))."""
        mu = _as_tensor(mu).to(dtype).reshape(-1, 3)
        n = mu.shape[0]
        q = quat_normalize(_as_tensor(q).to(dtype).reshape(n, 4))
        s = _as_tensor(s).to(torch.float64).reshape(n, 3)
        sigma = _as_tensor(sigma).to(torch.float64).reshape(n).clamp(1e-7, 1 - 1e-7)
        return SceneState(
            mu=mu,
            q=q,
            log_s=torch.log(s).to(dtype),
            logit_sigma=logit(sigma).to(dtype),
            sh=_as_tensor(sh).to(dtype).reshape(n, 4, 3),
            timestep=timestep,
        )


@dataclass
class Camera:
    """Pinhole camera; extrinsic maps world to camera: x_cam = R x + t."""

    R: Tensor                   # [3, 3] world-to-camera rotation
    t: Tensor                   # [3]
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = _as_tensor(self.R).reshape(3, 3)
        self.t = _as_tensor(self.t).reshape(3)
        if min(self.fx, self.fy) <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("intrinsics and image size must be positive")
        err = (self.R.to(torch.float64) @ self.R.to(torch.float64).T - torch.eye(3, dtype=torch.float64)).abs().max()
        if err > 1e-6:
            raise ValueError(f"extrinsic rotation not orthonormal (max deviation {err:.2e})")

    @property
    def center(self) -> Tensor:
        """Camera origin in world coordinates."""
        return -(self.R.T @ self.t)

    def to(self, dtype) -> "Camera":
        return Camera(self.R.to(dtype), self.t.to(dtype), self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @staticmethod
    def look_at(eye, target, up=(0.0, 0.0, 1.0), fx=100.0, fy=None, width=64, height=64):
        """Camera at `eye` looking toward `target`; +z in camera space points forward."""
        eye = _as_tensor(eye, torch.float64).reshape(3)
        target = _as_tensor(target, torch.float64).reshape(3)
        up = _as_tensor(up, torch.float64).reshape(3)
        fwd = target - eye
        fwd = fwd / torch.linalg.norm(fwd)
        right = torch.linalg.cross(fwd, up)
        rn = torch.linalg.norm(right)
        if rn < 1e-9:
            up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
            right = torch.linalg.cross(fwd, up)
            rn = torch.linalg.norm(right)
        right = right / rn
        down = torch.linalg.cross(fwd, right)
        R = torch.stack([right, down, fwd])  # rows: camera axes in world coords
        t = -(R @ eye)
        if fy is None:
            fy = fx
        return Camera(
            R=R.to(torch.float32),
            t=t.to(torch.float32),
            fx=float(fx),
            fy=float(fy),
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
        )
