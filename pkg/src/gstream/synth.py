"""Synthetic multi-view scenes with known motion, for tests and demos.

Scenes are a few hundred Gaussians in a unit-scale volume observed by a
ring of cameras. A labeled subset carries the motion program: rigid
translation/rotation per frame, or appearance at a chosen frame (opacity
switched from near-zero). Ground-truth images come from this package's
own renderer, so supervision is self-consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .core import Camera, SceneState, quat_from_axis_angle, quat_normalize, quat_raw_compose
from .render import RenderConfig, _render_tensors

PROGRAMS = ("static", "rigid", "appear")
HIDDEN_LOGIT = -16.0    # sigmoid ~= 1e-7: invisible but valid


@dataclass
class SynthConfig:
    n_points: int = 500
    n_moving: int = 50
    n_views: int = 8
    image_size: int = 64
    n_frames: int = 2
    program: str = "rigid"
    translation: tuple = (0.1, 0.0, 0.0)    # per-frame offset of the moving subset
    rotation_deg: float = 0.0               # per-frame spin about +z at the subset centroid
    appear_frame: int = 5
    seed: int = 0
    spread: float = 1.0
    cluster_radius: float = 0.25
    camera_distance: float = 3.2

    def __post_init__(self):
        if self.program not in PROGRAMS:
            raise ValueError(f"unknown program {self.program!r}; choose from {PROGRAMS}")
        if not (0 <= self.n_moving <= self.n_points):
            raise ValueError("n_moving out of range")


@dataclass
class SynthScene:
    config: SynthConfig
    cams: list[Camera]
    scenes: list[SceneState]            # ground truth per frame
    images: list[list[Tensor]]          # [frame][view] H,W,3 in [0,1]
    moving: Tensor                      # [N] bool motion label

    @property
    def n_frames(self) -> int:
        return len(self.scenes)


def ring_cameras(n_views: int, image_size: int, distance: float) -> list[Camera]:
    """Cameras on a ring around the origin, alternating two elevations."""
    cams = []
    f = float(image_size)
    for i in range(n_views):
        a = 2.0 * math.pi * i / n_views
        height = 0.35 * distance if i % 2 == 0 else -0.12 * distance
        eye = (distance * math.cos(a), distance * math.sin(a), height)
        cams.append(
            Camera.look_at(
                eye=eye, target=(0.0, 0.0, 0.0),
                fx=f, fy=f, width=image_size, height=image_size,
            )
        )
    return cams


def _random_unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _base_scene(cfg: SynthConfig, rng: np.random.Generator) -> tuple[SceneState, Tensor]:
    # The moving cluster floats above the static volume so its sightlines stay
    # clear of the background for every ring camera; motion then only changes
    # pixels owned by the cluster itself.
    n, m = cfg.n_points, cfg.n_moving
    static = rng.uniform(-cfg.spread, cfg.spread, size=(n - m, 3))
    static[:, 2] = rng.uniform(-cfg.spread, 0.15 * cfg.spread, size=n - m)
    center = np.concatenate([rng.uniform(-0.25 * cfg.spread, 0.25 * cfg.spread, size=2), [0.75 * cfg.spread]])
    cluster = center + cfg.cluster_radius * rng.normal(size=(m, 3)) / math.sqrt(3.0)
    mu = np.concatenate([cluster, static], axis=0) if m else static

    q = _random_unit_quats(rng, n)
    log_s = rng.uniform(math.log(0.04), math.log(0.10), size=(n, 3))
    sigma = rng.uniform(0.55, 0.9, size=n)
    sh = np.zeros((n, 4, 3))
    sh[:, 0, :] = rng.uniform(-1.2, 1.2, size=(n, 3))
    sh[:, 1:, :] = rng.uniform(-0.25, 0.25, size=(n, 3, 3))

    scene = SceneState(
        mu=torch.from_numpy(mu).to(torch.float32),
        q=torch.from_numpy(q).to(torch.float32),
        log_s=torch.from_numpy(log_s).to(torch.float32),
        logit_sigma=torch.logit(torch.from_numpy(sigma).to(torch.float32)),
        sh=torch.from_numpy(sh).to(torch.float32),
        timestep=0,
    )
    moving = torch.zeros(n, dtype=torch.bool)
    moving[:m] = True
    return scene, moving


def _frame_scene(base: SceneState, moving: Tensor, cfg: SynthConfig, t: int) -> SceneState:
    out = base.clone()
    out.timestep = t
    if cfg.program == "static" or not bool(moving.any()):
        return out
    sel = torch.nonzero(moving, as_tuple=False).reshape(-1)
    if cfg.program == "appear":
        if t < cfg.appear_frame:
            out.logit_sigma[sel] = HIDDEN_LOGIT
        return out
    # rigid: rotate about the subset centroid, then translate
    offset = torch.tensor(cfg.translation, dtype=base.dtype) * t
    angle = math.radians(cfg.rotation_deg) * t
    pos = base.mu[sel]
    if abs(angle) > 0:
        centroid = pos.mean(dim=0)
        ca, sa = math.cos(angle), math.sin(angle)
        rot = torch.tensor([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]], dtype=base.dtype)
        pos = (pos - centroid) @ rot.T + centroid
        dq = quat_from_axis_angle((0.0, 0.0, 1.0), angle, dtype=base.dtype)
        out.q[sel] = quat_normalize(quat_raw_compose(dq.expand(sel.shape[0], 4), base.q[sel]))
    out.mu[sel] = pos + offset
    return out


def render_ground_truth(scene: SceneState, cams: list[Camera], render_cfg: RenderConfig = RenderConfig()) -> list[Tensor]:
    images = []
    with torch.no_grad():
        for cam in cams:
            img, _ = _render_tensors(
                scene.mu, scene.q, scene.log_s, scene.logit_sigma, scene.sh, cam, render_cfg
            )
            images.append(img.clone())
    return images


def make_scene(cfg: SynthConfig) -> SynthScene:
    rng = np.random.default_rng(cfg.seed)
    base, moving = _base_scene(cfg, rng)
    cams = ring_cameras(cfg.n_views, cfg.image_size, cfg.camera_distance)
    scenes = [_frame_scene(base, moving, cfg, t) for t in range(cfg.n_frames)]
    images = [render_ground_truth(s, cams) for s in scenes]
    return SynthScene(config=cfg, cams=cams, scenes=scenes, images=images, moving=moving)


def perturb_scene(scene: SceneState, seed: int, pos_sigma: float = 0.05) -> SceneState:
    """Noise-injected copy, the stand-in for an imperfect initialization."""
    rng = np.random.default_rng(seed)
    out = scene.clone()
    out.mu = out.mu + torch.from_numpy(rng.normal(0.0, pos_sigma, size=(scene.n_points, 3))).to(scene.dtype)
    return out
