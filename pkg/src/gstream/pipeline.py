"""Orchestration: first-frame fitting, GoF scheduling, metrics, stats.

A stream is one INIT record followed by per-frame payloads: frames off the
key-frame grid get a keypoint motion field, frames on the grid (t % s = 0)
get an error-aware correction. Every frame is trained against the decoded
previous state, so the emitted stream reproduces the encoder's scene
bit-exactly on any receiver.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .codec import (
    TAG_INIT,
    TAG_KEYCORR,
    TAG_MOTION,
    InitPayload,
    KeycorrPayload,
    MotionPayload,
    StreamHeader,
    read_container,
)
from .core import Camera, SceneState
from .corrector import KeyframeFitConfig, optimize_keyframe
from .datasets import MultiViewDataset
from .keypoint import dynamic_scores, select_keypoints, viewspace_gradients
from .motion import MotionFitConfig, optimize_motion_frame
from .render import RenderConfig, _render_tensors, recon_loss_t
from .stream import ReceiverSession, SenderSession

log = logging.getLogger(__name__)

TAG_NAMES = {TAG_INIT: "INIT", TAG_MOTION: "MOTION", TAG_KEYCORR: "KEYCORR"}


@dataclass
class EncodeConfig:
    k: int = 200                    # keypoints per non-key frame
    s: int = 10                     # GoF interval: key frame every s frames
    tau_adap: float = 0.01
    phi_thres: float = 0.5
    lambda_dssim: float = 0.2
    lambda_error: float = 0.001
    iters_nonkey: int = 150
    iters_key: int = 1000
    iters_init: int = 500
    lr_attr: float = 0.002
    lr_influence: float = 0.02
    lr_mask: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.s < 1:
            raise ValueError("k and s must be positive")
        for name in ("iters_nonkey", "iters_key", "iters_init"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def write_config(cfg: EncodeConfig, path: str | Path):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(EncodeConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path: str | Path, base: Optional[EncodeConfig] = None) -> EncodeConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys are errors."""
    cfg = dataclasses.replace(base) if base else EncodeConfig()
    types = {f.name: f.type for f in dataclasses.fields(EncodeConfig)}
    casts = {"int": int, "float": float}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, casts[types[key]](value))
    return dataclasses.replace(cfg)  # re-run validation


# --- scene files ----------------------------------------------------------------


def save_scene(path: str | Path, scene: SceneState):
    np.savez(
        path,
        mu=scene.mu.detach().to(torch.float32).numpy(),
        q=scene.q.detach().to(torch.float32).numpy(),
        log_s=scene.log_s.detach().to(torch.float32).numpy(),
        logit_sigma=scene.logit_sigma.detach().to(torch.float32).numpy(),
        sh=scene.sh.detach().to(torch.float32).numpy(),
        timestep=np.int64(scene.timestep),
    )


def load_scene(path: str | Path) -> SceneState:
    with np.load(path) as z:
        return SceneState(
            mu=torch.from_numpy(z["mu"]).to(torch.float32),
            q=torch.from_numpy(z["q"]).to(torch.float32),
            log_s=torch.from_numpy(z["log_s"]).to(torch.float32),
            logit_sigma=torch.from_numpy(z["logit_sigma"]).to(torch.float32),
            sh=torch.from_numpy(z["sh"]).to(torch.float32),
            timestep=int(z["timestep"]),
        )


# --- metrics --------------------------------------------------------------------


def psnr(rendered: Tensor, gt: Tensor) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(gt.shape)}")
    mse = float(((rendered.to(torch.float64) - gt.to(torch.float64)) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def render_scene(scene: SceneState, cam: Camera, render_cfg: RenderConfig = RenderConfig()) -> Tensor:
    with torch.no_grad():
        img, _ = _render_tensors(
            scene.mu, scene.q, scene.log_s, scene.logit_sigma, scene.sh, cam, render_cfg
        )
    return img


# --- first frame ----------------------------------------------------------------


def fit_first_frame(
    dataset: MultiViewDataset,
    init_scene: SceneState,
    cfg: EncodeConfig = EncodeConfig(),
    render_cfg: RenderConfig = RenderConfig(),
) -> SceneState:
    """Optimize all attributes of the initial point set against frame 0.

    No densification or pruning: the point count is fixed for the whole
    stream. One optimizer step per full pass over the training views.
    """
    if init_scene.n_points == 0:
        raise ValueError("empty initialization")
    torch.manual_seed(cfg.seed)
    dtype = init_scene.dtype
    params = {k: t.detach().clone().requires_grad_(True) for k, t in init_scene.tensors().items()}
    opt = torch.optim.Adam(params.values(), lr=cfg.lr_attr, betas=(0.9, 0.999), eps=1e-15)
    cams = dataset.train_cams
    gts = dataset.train_images(0)
    n_views = len(cams)
    for step in range(cfg.iters_init):
        opt.zero_grad()
        total = 0.0
        for cam, gt in zip(cams, gts):
            img, _ = _render_tensors(
                params["mu"], params["q"], params["log_s"], params["logit_sigma"], params["sh"],
                cam, render_cfg,
            )
            loss = recon_loss_t(img, gt.to(dtype)) / n_views
            loss.backward()
            total += float(loss.detach())
        if not math.isfinite(total):
            raise RuntimeError(f"first-frame fit diverged at step {step}: loss={total}")
        opt.step()
        if step % 50 == 0:
            log.info("first-frame fit step %d: loss %.5f", step, total)
    return SceneState(
        mu=params["mu"].detach(),
        q=params["q"].detach(),
        log_s=params["log_s"].detach(),
        logit_sigma=params["logit_sigma"].detach(),
        sh=params["sh"].detach(),
        timestep=0,
    )


# --- encode / decode --------------------------------------------------------------


def encode_sequence(
    dataset: MultiViewDataset,
    scene0: SceneState,
    cfg: EncodeConfig = EncodeConfig(),
    render_cfg: RenderConfig = RenderConfig(),
) -> bytes:
    """Produce the full container for a fitted frame-0 scene plus all frames."""
    torch.manual_seed(cfg.seed)
    n = scene0.n_points
    header = StreamHeader(
        n_points=n,
        sh_degree=1,
        gof_interval=cfg.s,
        k=cfg.k,
        tau_adap=cfg.tau_adap,
        phi_thres=cfg.phi_thres,
    )
    sender = SenderSession(header)
    sender.push(InitPayload(scene0))
    cams = dataset.train_cams
    k_eff = min(cfg.k, n)
    for t in range(1, dataset.n_frames):
        prev = sender.scene
        gts_t = [img.to(prev.dtype) for img in dataset.train_images(t)]
        if t % cfg.s != 0:
            gts_prev = [img.to(prev.dtype) for img in dataset.train_images(t - 1)]
            g_prev, g_t = viewspace_gradients(prev, cams, gts_prev, gts_t, render_cfg)
            kps = select_keypoints(dynamic_scores(g_t, g_prev), k_eff)
            fld = optimize_motion_frame(
                prev, kps, cams, gts_t,
                MotionFitConfig(
                    iters=cfg.iters_nonkey, lr_motion=cfg.lr_attr, lr_influence=cfg.lr_influence,
                    tau_adap=cfg.tau_adap, render=render_cfg,
                ),
            )
            tag, body = sender.push(MotionPayload(fld))
        else:
            mr = optimize_keyframe(
                prev, cams, gts_t,
                KeyframeFitConfig(
                    iters=cfg.iters_key, lr_mask=cfg.lr_mask, lr_resid=cfg.lr_attr,
                    lambda_error=cfg.lambda_error, phi_thres=cfg.phi_thres, render=render_cfg,
                ),
            )
            tag, body = sender.push(KeycorrPayload(mr))
        log.info("frame %d: %s, %d bytes", t, TAG_NAMES[tag], len(body))
    return sender.container()


def decode_stream(container: bytes) -> tuple[StreamHeader, list[SceneState]]:
    """Decode every frame of a container in order."""
    header, records = read_container(container)
    session = ReceiverSession(header)
    scenes = [session.apply_record(tag, body).clone() for tag, body in records]
    return header, scenes


# --- stats ------------------------------------------------------------------------

STATS_COLUMNS = ("frame", "tag", "bytes", "cumulative_bytes", "psnr_db")


def stats_rows(
    container: bytes,
    dataset: Optional[MultiViewDataset] = None,
    render_cfg: RenderConfig = RenderConfig(),
) -> list[dict]:
    """Per-frame wire cost and, when ground truth is supplied, test-view PSNR."""
    header, records = read_container(container)
    session = ReceiverSession(header)
    rows = []
    total = 0
    for t, (tag, body) in enumerate(records):
        scene = session.apply_record(tag, body)
        size = 5 + len(body)  # record framing included
        total += size
        row = {"frame": t, "tag": TAG_NAMES[tag], "bytes": size, "cumulative_bytes": total, "psnr_db": ""}
        if dataset is not None and t < dataset.n_frames:
            rendered = render_scene(scene, dataset.test_cam, render_cfg)
            row["psnr_db"] = f"{psnr(rendered, dataset.test_image(t).to(rendered.dtype)):.4f}"
        rows.append(row)
    return rows


def write_stats_csv(rows: list[dict], path: str | Path):
    out = io.StringIO()
    out.write(",".join(STATS_COLUMNS) + "\n")
    for row in rows:
        out.write(",".join(str(row[c]) for c in STATS_COLUMNS) + "\n")
    Path(path).write_text(out.getvalue())
