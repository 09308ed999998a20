"""Keypoint-driven motion: influence fields, membership, aggregation, fitting.

Each keypoint carries 14 scalars: a translation offset (3), a rotation
offset quaternion (4), and an anisotropic influence field given by an
orientation quaternion (4) and per-axis extents (3). A Gaussian is
controlled by a keypoint when the field weight at its position reaches
tau_adap; controlled Gaussians move by the influence-weighted sum of their
controllers' offsets (raw sums, no weight normalization). Uncontrolled
Gaussians are left bit-identical.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .core import (
    Camera,
    SceneState,
    build_precision,
    quat_identity,
    quat_normalize,
    quat_raw_compose,
)
from .keypoint import KeypointSet
from .render import RenderConfig, DEFAULT_CONFIG, _render_tensors, recon_loss_t

log = logging.getLogger(__name__)

DEFAULT_TAU_ADAP = 0.01
QUAT_DEGENERATE_NORM = 1e-8


@dataclass
class Keypoint:
    """Selected Gaussian index plus the 14 transmitted scalars."""

    index: int
    delta_mu: Tensor    # (3,)
    delta_q: Tensor     # (4,) rotation offset, identity when no rotation
    q_adap: Tensor      # (4,) influence-field orientation
    s_adap: Tensor      # (3,) influence-field extents, positive world units

    def __post_init__(self):
        self.delta_mu = torch.as_tensor(self.delta_mu, dtype=torch.float32).reshape(3)
        self.delta_q = torch.as_tensor(self.delta_q, dtype=torch.float32).reshape(4)
        self.q_adap = torch.as_tensor(self.q_adap, dtype=torch.float32).reshape(4)
        self.s_adap = torch.as_tensor(self.s_adap, dtype=torch.float32).reshape(3)
        if (self.s_adap <= 0).any():
            raise ValueError("influence extents must be positive")

    def params(self) -> Tensor:
        """The 14 payload scalars in wire order."""
        return torch.cat([self.delta_mu, self.delta_q, self.q_adap, self.s_adap])


@dataclass
class MotionField:
    keypoints: list[Keypoint]
    tau_adap: float = DEFAULT_TAU_ADAP

    def __post_init__(self):
        idx = [kp.index for kp in self.keypoints]
        if len(set(idx)) != len(idx):
            raise ValueError("keypoint indices must be distinct")
        if not (0.0 < self.tau_adap < 1.0):
            raise ValueError("tau_adap must lie in (0, 1)")

    @property
    def k(self) -> int:
        return len(self.keypoints)


def influence_weight(kp: Keypoint, kp_pos, g_pos) -> float:
    """Field weight exp(-1/2 d^T inv(cov_adap) d) of one keypoint at one position."""
    kp_pos = torch.as_tensor(kp_pos, dtype=torch.float64).reshape(3)
    g_pos = torch.as_tensor(g_pos, dtype=torch.float64).reshape(3)
    prec = build_precision(kp.q_adap.to(torch.float64), torch.log(kp.s_adap.to(torch.float64)))
    d = g_pos - kp_pos
    return float(torch.exp(-0.5 * d @ prec @ d))


def _field_weights(kp_pos: Tensor, q_adap: Tensor, log_s_adap: Tensor, positions: Tensor) -> Tensor:
    """[k, N] weights of every keypoint field at every Gaussian position."""
    prec = build_precision(q_adap, log_s_adap)              # [k, 3, 3]
    d = positions.unsqueeze(0) - kp_pos.unsqueeze(1)        # [k, N, 3]
    m = torch.einsum("kni,kij,knj->kn", d, prec, d)
    return torch.exp(-0.5 * m)


def controlled_set(fld: MotionField, scene: SceneState) -> tuple[Tensor, Tensor]:
    """Membership of every Gaussian in every keypoint's controlled set.

    Returns (weights [k, N], member [k, N] bool) with member = weight >= tau_adap.
    Recomputed from the current field parameters on every call.
    """
    dtype = scene.dtype
    kp_pos = scene.mu[torch.tensor([kp.index for kp in fld.keypoints], dtype=torch.int64)]
    q_adap = torch.stack([kp.q_adap for kp in fld.keypoints]).to(dtype)
    log_s = torch.log(torch.stack([kp.s_adap for kp in fld.keypoints])).to(dtype)
    w = _field_weights(kp_pos, q_adap, log_s, scene.mu)
    return w, w >= fld.tau_adap


def _aggregate(weights: Tensor, member: Tensor, delta_mu: Tensor, delta_q: Tensor):
    """Weighted raw sums of controller offsets for every Gaussian.

    Returns (d_mu [N,3], d_q [N,4] normalized, controlled [N] bool). The
    membership gate contributes no gradient; weights of current members do.
    """
    wm = weights * member.to(weights.dtype)
    d_mu = wm.transpose(0, 1) @ delta_mu            # [N, 3]
    d_q_raw = wm.transpose(0, 1) @ delta_q          # [N, 4]
    controlled = member.any(dim=0)

    norm = torch.linalg.norm(d_q_raw, dim=-1, keepdim=True)
    degenerate = (norm < QUAT_DEGENERATE_NORM).reshape(-1) & controlled
    if degenerate.any():
        log.warning("aggregated rotation near zero for %d Gaussians; treated as identity", int(degenerate.sum()))
    ident = quat_identity(weights.dtype).expand_as(d_q_raw)
    safe = torch.where(norm < QUAT_DEGENERATE_NORM, torch.ones_like(norm), norm)
    d_q = torch.where((norm < QUAT_DEGENERATE_NORM) | ~controlled.unsqueeze(-1), ident, d_q_raw / safe)
    return d_mu, d_q, controlled


def aggregate_motion(j: int, weights: Tensor, member: Tensor, fld: MotionField):
    """Motion of Gaussian j: raw influence-weighted sums over its controllers."""
    delta_mu = torch.stack([kp.delta_mu for kp in fld.keypoints]).to(weights.dtype)
    delta_q = torch.stack([kp.delta_q for kp in fld.keypoints]).to(weights.dtype)
    d_mu, d_q, controlled = _aggregate(weights[:, j : j + 1], member[:, j : j + 1], delta_mu, delta_q)
    if not bool(controlled[0]):
        return torch.zeros(3, dtype=weights.dtype), quat_identity(weights.dtype)
    return d_mu[0], d_q[0]


def apply_motion(scene_prev: SceneState, fld: MotionField) -> SceneState:
    """Advance the scene one frame under the motion field.

    Controlled Gaussians translate by their aggregated offset and compose
    the aggregated rotation on the left; scale, opacity and SH are
    untouched. Uncontrolled Gaussians are bit-identical to the previous
    frame.
    """
    out = scene_prev.clone()
    out.timestep = scene_prev.timestep + 1
    if fld.k == 0:
        return out
    weights, member = controlled_set(fld, scene_prev)
    delta_mu = torch.stack([kp.delta_mu for kp in fld.keypoints]).to(scene_prev.dtype)
    delta_q = torch.stack([kp.delta_q for kp in fld.keypoints]).to(scene_prev.dtype)
    d_mu, d_q, controlled = _aggregate(weights, member, delta_mu, delta_q)
    if not controlled.any():
        return out
    sel = torch.nonzero(controlled, as_tuple=False).reshape(-1)
    out.mu[sel] = scene_prev.mu[sel] + d_mu[sel]
    out.q[sel] = quat_normalize(quat_raw_compose(d_q[sel], scene_prev.q[sel]))
    return out


def median_nn_spacing(positions: Tensor) -> float:
    """Median nearest-neighbor distance, the isotropic field-extent init."""
    n = positions.shape[0]
    if n < 2:
        return 1.0
    d = torch.cdist(positions.to(torch.float64), positions.to(torch.float64))
    d.fill_diagonal_(float("inf"))
    return float(d.min(dim=1).values.median())


@dataclass
class MotionFitConfig:
    iters: int = 150
    lr_motion: float = 0.002        # translation and rotation offsets
    lr_influence: float = 0.02      # field orientation and extents
    tau_adap: float = DEFAULT_TAU_ADAP
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    render: RenderConfig = field(default_factory=RenderConfig)


def optimize_motion_frame(
    scene_prev: SceneState,
    kps: KeypointSet,
    cams: list[Camera],
    gts_t: list[Tensor],
    cfg: MotionFitConfig = MotionFitConfig(),
) -> MotionField:
    """Fit the per-frame motion field against the current targets.

    One optimizer step per full pass over the views. Keypoint field centers
    stay frozen at their Gaussian's previous-frame position; membership is
    refreshed every step and its threshold gate passes no gradient.
    """
    dtype = scene_prev.dtype
    k = kps.k
    kp_pos = scene_prev.mu[kps.indices].detach()

    delta_mu = torch.zeros(k, 3, dtype=dtype, requires_grad=True)
    delta_q = quat_identity(dtype).repeat(k, 1).requires_grad_(True)
    q_adap = quat_identity(dtype).repeat(k, 1).requires_grad_(True)
    init_extent = median_nn_spacing(scene_prev.mu)
    log_s_adap = torch.full((k, 3), float(torch.log(torch.tensor(init_extent))), dtype=dtype, requires_grad=True)

    opt = torch.optim.Adam(
        [
            {"params": [delta_mu, delta_q], "lr": cfg.lr_motion},
            {"params": [q_adap, log_s_adap], "lr": cfg.lr_influence},
        ],
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
    )

    mu0 = scene_prev.mu.detach()
    q0 = scene_prev.q.detach()
    log_s0 = scene_prev.log_s.detach()
    logit_sigma0 = scene_prev.logit_sigma.detach()
    sh0 = scene_prev.sh.detach()
    n_views = len(cams)

    for step in range(cfg.iters):
        opt.zero_grad()
        weights = _field_weights(kp_pos, q_adap, log_s_adap, mu0)
        member = (weights >= cfg.tau_adap).detach()
        d_mu, d_q, controlled = _aggregate(weights, member, delta_mu, delta_q)
        cmask = controlled.unsqueeze(-1).to(dtype)
        mu_t = mu0 + cmask * d_mu
        q_t = torch.where(controlled.unsqueeze(-1), quat_raw_compose(d_q, q0), q0)
        total = 0.0
        for cam, gt in zip(cams, gts_t):
            image, _ = _render_tensors(mu_t, q_t, log_s0, logit_sigma0, sh0, cam, cfg.render)
            loss = recon_loss_t(image, gt) / n_views
            loss.backward(retain_graph=True)
            total += float(loss.detach())
        if not math.isfinite(total):
            raise RuntimeError(f"motion fit diverged at step {step}: loss={total}")
        opt.step()

    keypoints = [
        Keypoint(
            index=int(kps.indices[i]),
            delta_mu=delta_mu[i].detach(),
            delta_q=quat_normalize(delta_q[i].detach()),
            q_adap=quat_normalize(q_adap[i].detach()),
            s_adap=torch.exp(log_s_adap[i].detach()),
        )
        for i in range(k)
    ]
    return MotionField(keypoints=keypoints, tau_adap=cfg.tau_adap)
