"""Error-aware key-frame correction.

A learnable logit per Gaussian is binarized with a straight-through
estimator; only Gaussians whose hard mask is on receive attribute
residuals, and a sparsity term on the soft mask prices every active
residual. The transmitted record is the hard-mask bitset plus residual
rows for exactly the masked Gaussians in ascending index order.

Gradient detail: the hard gate follows the straight-through contract in
the mask logit (d hard / d m = d soft / d m exactly). The all-zero start
is a saddle of the hard-gated objective: a residual with zero forward
influence receives no gradient, and a zero residual gives the logit no
reconstruction gradient either. The fit therefore opens with a short
warmup that places the soft mask in the forward product (a differentiable
relaxation of the same objective; with zero residuals the first iterate
still renders the previous scene bit-identically), then switches to the
hard gate, under which unmasked residuals freeze at whatever the warmup
found and the forward matches the decoded update exactly.

Adam normalizes per-parameter steps, so the constant sparsity pull cannot
sink a logit whose reconstruction gradient is dominated by float noise
from its own near-zero residual; a few masks flipped on by warmup noise
would otherwise survive indefinitely (and can co-adapt to cancel one
another, which defeats leave-one-out tests). A final selection pass
therefore rebuilds the mask from empty, re-admitting candidates in
confidence order only when each strictly lowers reconstruction loss, and
keeps the original mask if it somehow reconstructs better — a discrete
descent step on the same objective, since the sparsity term does not
depend on the hard decisions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .core import (
    Camera,
    GaussianPoint,
    SceneState,
    quat_identity,
    quat_normalize,
    quat_raw_compose,
)
from .render import RenderConfig, _render_tensors, recon_loss_t

logger = logging.getLogger(__name__)

DEFAULT_PHI_THRES = 0.5
DEFAULT_LAMBDA_ERROR = 0.001
QUAT_DEGENERATE_NORM = 1e-8


def soft_mask(m: Tensor) -> Tensor:
    """Logistic relaxation of the mask."""
    return torch.sigmoid(m)


def hard_mask(soft: Tensor, phi: float = DEFAULT_PHI_THRES) -> Tensor:
    """Binarize with pass-through gradient.

    Forward value is 1 where soft > phi (strict), else 0; the gradient
    with respect to the logit equals the soft mask's gradient exactly.
    """
    indicator = (soft > phi).to(soft.dtype)
    return (indicator - soft).detach() + soft


def gate(mask: Tensor, x: Tensor) -> Tensor:
    """Broadcast the per-Gaussian mask over a residual tensor's trailing dims."""
    while mask.dim() < x.dim():
        mask = mask.unsqueeze(-1)
    return mask * x


@dataclass
class MaskState:
    m: Tensor                           # [N] raw logits
    phi_thres: float = DEFAULT_PHI_THRES

    def __post_init__(self):
        self.m = torch.as_tensor(self.m).reshape(-1)
        if not torch.isfinite(self.m).all():
            raise ValueError("mask logits must be finite")
        if not (0.0 < self.phi_thres < 1.0):
            raise ValueError("phi_thres must lie in (0, 1)")

    def soft(self) -> Tensor:
        return soft_mask(self.m)

    def hard(self) -> Tensor:
        return hard_mask(self.soft(), self.phi_thres)


@dataclass
class ResidualRecord:
    """Per-Gaussian attribute deltas; the quaternion delta is an increment."""

    d_mu: Tensor            # (3,)
    d_q: Tensor             # (4,)
    d_log_s: Tensor         # (3,)
    d_logit_sigma: Tensor   # scalar
    d_sh: Tensor            # (4, 3)


@dataclass
class MaskedResiduals:
    """Hard-mask bitset plus residual rows for the masked Gaussians.

    Rows are in ascending Gaussian index order; row count equals the mask
    popcount.
    """

    hard: Tensor            # [N] bool
    d_mu: Tensor            # [M, 3]
    d_q: Tensor             # [M, 4]
    d_log_s: Tensor         # [M, 3]
    d_logit_sigma: Tensor   # [M]
    d_sh: Tensor            # [M, 4, 3]

    def __post_init__(self):
        self.hard = torch.as_tensor(self.hard, dtype=torch.bool).reshape(-1)
        m = int(self.hard.sum())
        planes = {
            "d_mu": (m, 3),
            "d_q": (m, 4),
            "d_log_s": (m, 3),
            "d_logit_sigma": (m,),
            "d_sh": (m, 4, 3),
        }
        for name, shape in planes.items():
            t = torch.as_tensor(getattr(self, name), dtype=torch.float32).reshape(*shape)
            if not torch.isfinite(t).all():
                raise ValueError(f"non-finite residual plane '{name}'")
            setattr(self, name, t)

    @property
    def n_points(self) -> int:
        return int(self.hard.shape[0])

    @property
    def popcount(self) -> int:
        return int(self.hard.sum())

    @property
    def indices(self) -> Tensor:
        return torch.nonzero(self.hard, as_tuple=False).reshape(-1)

    def record(self, row: int) -> ResidualRecord:
        return ResidualRecord(
            d_mu=self.d_mu[row],
            d_q=self.d_q[row],
            d_log_s=self.d_log_s[row],
            d_logit_sigma=self.d_logit_sigma[row],
            d_sh=self.d_sh[row],
        )

    @staticmethod
    def empty(n: int) -> "MaskedResiduals":
        z = torch.zeros
        return MaskedResiduals(
            hard=torch.zeros(n, dtype=torch.bool),
            d_mu=z(0, 3), d_q=z(0, 4), d_log_s=z(0, 3), d_logit_sigma=z(0), d_sh=z(0, 4, 3),
        )


def error_loss(soft: Tensor) -> Tensor:
    """Sparsity pressure: mean of the soft mask."""
    if soft.numel() == 0:
        raise ValueError("error loss needs at least one Gaussian")
    return soft.mean()


def apply_residuals(theta_prev: GaussianPoint, delta: ResidualRecord, hard: int) -> GaussianPoint:
    """Update a single Gaussian; hard=0 returns the input unchanged."""
    if not hard:
        return theta_prev
    dq = torch.as_tensor(delta.d_q, dtype=theta_prev.q.dtype)
    if float(torch.linalg.norm(dq)) < QUAT_DEGENERATE_NORM:
        dq = quat_identity(theta_prev.q.dtype)
    new_logit = torch.logit(torch.as_tensor(theta_prev.sigma, dtype=torch.float64)) + float(delta.d_logit_sigma)
    return GaussianPoint(
        mu=theta_prev.mu + delta.d_mu.to(theta_prev.mu.dtype),
        q=quat_normalize(quat_raw_compose(dq, theta_prev.q)),
        s=torch.exp(torch.log(theta_prev.s) + delta.d_log_s.to(theta_prev.s.dtype)),
        sigma=float(torch.sigmoid(new_logit)),
        sh=theta_prev.sh + delta.d_sh.to(theta_prev.sh.dtype),
    )


def apply_masked_residuals(scene_prev: SceneState, mr: MaskedResiduals) -> SceneState:
    """Advance the scene one frame under a correction record.

    Masked Gaussians receive additive updates in position, SH, log-scale
    and opacity logit, and a left-composed quaternion increment; unmasked
    Gaussians are bit-identical to the previous frame.
    """
    if mr.n_points != scene_prev.n_points:
        raise ValueError(f"mask covers {mr.n_points} Gaussians, scene has {scene_prev.n_points}")
    out = scene_prev.clone()
    out.timestep = scene_prev.timestep + 1
    sel = mr.indices
    if sel.numel() == 0:
        return out
    dtype = scene_prev.dtype
    dq = mr.d_q.to(dtype)
    norm = torch.linalg.norm(dq, dim=-1, keepdim=True)
    dq = torch.where(norm < QUAT_DEGENERATE_NORM, quat_identity(dtype).expand_as(dq), dq)
    out.mu[sel] = scene_prev.mu[sel] + mr.d_mu.to(dtype)
    out.q[sel] = quat_normalize(quat_raw_compose(dq, scene_prev.q[sel]))
    out.log_s[sel] = scene_prev.log_s[sel] + mr.d_log_s.to(dtype)
    out.logit_sigma[sel] = scene_prev.logit_sigma[sel] + mr.d_logit_sigma.to(dtype)
    out.sh[sel] = scene_prev.sh[sel] + mr.d_sh.to(dtype)
    return out


@dataclass
class KeyframeFitConfig:
    iters: int = 1000
    lr_mask: float = 0.01
    lr_resid: float = 0.002
    lambda_error: float = DEFAULT_LAMBDA_ERROR
    phi_thres: float = DEFAULT_PHI_THRES
    warmup_frac: float = 0.2        # fraction of iters with the soft mask in the forward
    prune: bool = True              # drop masks whose removal does not hurt reconstruction
    prune_share: float = 0.05      # min share of the largest solo contribution to keep a mask
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    render: RenderConfig = field(default_factory=RenderConfig)


def optimize_keyframe(
    scene_prev: SceneState,
    cams: list[Camera],
    gts_t: list[Tensor],
    cfg: KeyframeFitConfig = KeyframeFitConfig(),
) -> MaskedResiduals:
    """Fit mask + residuals against the current targets.

    Logits and residuals start at zero (identity quaternion increment), so
    the first iterate renders scene_prev bit-identically; the sparsity term
    then competes with reconstruction over which Gaussians earn an update.
    """
    dtype = scene_prev.dtype
    n = scene_prev.n_points
    mu0 = scene_prev.mu.detach()
    q0 = scene_prev.q.detach()
    log_s0 = scene_prev.log_s.detach()
    logit_sigma0 = scene_prev.logit_sigma.detach()
    sh0 = scene_prev.sh.detach()

    m = torch.zeros(n, dtype=dtype, requires_grad=True)
    d_mu = torch.zeros(n, 3, dtype=dtype, requires_grad=True)
    d_q = quat_identity(dtype).repeat(n, 1).requires_grad_(True)
    d_log_s = torch.zeros(n, 3, dtype=dtype, requires_grad=True)
    d_logit_sigma = torch.zeros(n, dtype=dtype, requires_grad=True)
    d_sh = torch.zeros(n, 4, 3, dtype=dtype, requires_grad=True)

    opt = torch.optim.Adam(
        [
            {"params": [m], "lr": cfg.lr_mask},
            {"params": [d_mu, d_q, d_log_s, d_logit_sigma, d_sh], "lr": cfg.lr_resid},
        ],
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
    )

    ident = quat_identity(dtype)
    n_views = len(cams)
    warmup_steps = int(round(cfg.warmup_frac * cfg.iters))
    for step in range(cfg.iters):
        opt.zero_grad()
        soft = soft_mask(m)
        g = soft if step < warmup_steps else hard_mask(soft, cfg.phi_thres)
        mu_t = mu0 + gate(g, d_mu)
        blend = ident + gate(g, d_q - ident)
        q_t = quat_raw_compose(blend, q0)
        log_s_t = log_s0 + gate(g, d_log_s)
        logit_sigma_t = logit_sigma0 + gate(g, d_logit_sigma)
        sh_t = sh0 + gate(g, d_sh)

        sparsity = cfg.lambda_error * error_loss(soft)
        sparsity.backward(retain_graph=True)
        total = float(sparsity.detach())
        for cam, gt in zip(cams, gts_t):
            image, _ = _render_tensors(mu_t, q_t, log_s_t, logit_sigma_t, sh_t, cam, cfg.render)
            loss = recon_loss_t(image, gt) / n_views
            loss.backward(retain_graph=True)
            total += float(loss.detach())
        if not math.isfinite(total):
            raise RuntimeError(f"key-frame fit diverged at step {step}: loss={total}")
        opt.step()

    with torch.no_grad():
        final_hard = soft_mask(m) > cfg.phi_thres

        def recon_total(hard_bool: Tensor) -> float:
            g = hard_bool.to(dtype)
            mu_t = mu0 + gate(g, d_mu)
            blend = ident + gate(g, d_q - ident)
            q_t = quat_raw_compose(blend, q0)
            log_s_t = log_s0 + gate(g, d_log_s)
            logit_sigma_t = logit_sigma0 + gate(g, d_logit_sigma)
            sh_t = sh0 + gate(g, d_sh)
            total = 0.0
            for cam, gt in zip(cams, gts_t):
                image, _ = _render_tensors(mu_t, q_t, log_s_t, logit_sigma_t, sh_t, cam, cfg.render)
                total += float(recon_loss_t(image, gt)) / n_views
            return total

        if cfg.prune and bool(final_hard.any()):
            # Growing back from empty avoids local minima where co-adapted
            # stray residuals block one-at-a-time removal. Admission requires
            # a minimum share of the largest solo contribution, so bystander
            # residuals that shave spill error without addressing its source
            # do not earn bitstream bytes.
            on = torch.nonzero(final_hard, as_tuple=False).reshape(-1)
            kept = torch.zeros_like(final_hard)
            empty_loss = recon_total(kept)
            raw_loss = recon_total(final_hard)
            solo = []
            for i in on.tolist():
                kept[i] = True
                solo.append(empty_loss - recon_total(kept))
                kept[i] = False
            solo_t = torch.tensor(solo)
            bar = cfg.prune_share * max(float(solo_t.max()), 0.0)
            order = on[torch.argsort(-solo_t, stable=True)]
            cur = empty_loss
            for i in order.tolist():
                kept[i] = True
                cand = recon_total(kept)
                if cand < cur - bar:
                    cur = cand
                else:
                    kept[i] = False
            # Fall back to the raw mask only on a catastrophic selection loss;
            # giving up sub-bar micro-optimizations is expected and fine.
            budget = max(empty_loss - raw_loss, 0.0)
            fell_back = raw_loss < cur - 10.0 * cfg.prune_share * budget
            logger.debug(
                "mask selection: raw=%d kept=%d empty=%.4e raw=%.4e kept_loss=%.4e "
                "bar=%.3e fallback=%s",
                int(on.numel()), int(kept.sum()), empty_loss, raw_loss, cur, bar, fell_back,
            )
            if fell_back:
                kept = final_hard
            final_hard = kept

        sel = torch.nonzero(final_hard, as_tuple=False).reshape(-1)
        dq_rows = d_q[sel]
        norms = torch.linalg.norm(dq_rows, dim=-1, keepdim=True)
        safe = torch.where(norms < QUAT_DEGENERATE_NORM, torch.ones_like(norms), norms)
        dq_rows = torch.where(norms < QUAT_DEGENERATE_NORM, ident.expand_as(dq_rows), dq_rows / safe)
        return MaskedResiduals(
            hard=final_hard,
            d_mu=d_mu[sel],
            d_q=dq_rows,
            d_log_s=d_log_s[sel],
            d_logit_sigma=d_logit_sigma[sel],
            d_sh=d_sh[sel],
        )
