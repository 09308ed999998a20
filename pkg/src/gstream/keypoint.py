"""Motion-sensitive keypoint selection.

A Gaussian is motion-sensitive when the gradient of the reconstruction
loss with respect to its projected 2D position changes between the target
images of consecutive frames, while the scene itself is held at the
previous frame. Scores are the per-view L2 norms of those gradient
differences, averaged over views; the top-k Gaussians become keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .core import Camera, SceneState
from .render import RenderConfig, DEFAULT_CONFIG, backward, recon_loss, render_view


@dataclass
class DynamicScores:
    scores: Tensor  # [N], nonnegative

    def __post_init__(self):
        if not torch.isfinite(self.scores).all():
            raise ValueError("non-finite dynamic scores")


@dataclass
class KeypointSet:
    indices: Tensor  # [k] int64, strictly sorted ascending

    @property
    def k(self) -> int:
        return int(self.indices.shape[0])


def viewspace_gradients(
    scene_prev: SceneState,
    cams: list[Camera],
    gts_prev: list[Tensor],
    gts_t: list[Tensor],
    cfg: RenderConfig = DEFAULT_CONFIG,
) -> tuple[Tensor, Tensor]:
    """Per-view viewspace gradients of the reconstruction loss.

    One render per view at the previous scene, then two backward passes:
    against the previous-frame target and the current-frame target.
    Returns (g_prev, g_t), each [V, N, 2].
    """
    if len(gts_prev) != len(gts_t) or len(cams) != len(gts_t):
        raise ValueError("view count mismatch between camera list and target frames")
    g_prev, g_t = [], []
    for cam, gt0, gt1 in zip(cams, gts_prev, gts_t):
        out = render_view(scene_prev, cam, cfg)
        _, d0 = recon_loss(out.image, gt0)
        _, d1 = recon_loss(out.image, gt1)
        g_prev.append(backward(out, d0).viewspace)
        g_t.append(backward(out, d1).viewspace)
        out._ctx = None  # free the graph
    return torch.stack(g_prev), torch.stack(g_t)


def dynamic_scores(g_t: Tensor, g_prev: Tensor) -> DynamicScores:
    """Mean over views of the L2 norm of the 2D gradient difference."""
    if g_t.shape != g_prev.shape:
        raise ValueError("gradient field shapes must match")
    if g_t.shape[0] == 0:
        raise ValueError("need at least one view")
    diff = torch.linalg.norm(g_t - g_prev, dim=-1)  # [V, N]
    return DynamicScores(scores=diff.mean(dim=0))


def select_keypoints(scores: DynamicScores, k: int) -> KeypointSet:
    """Indices of the k largest scores; ties broken by ascending index."""
    n = scores.scores.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for {n} Gaussians")
    s = scores.scores.detach().cpu().numpy().astype(np.float64)
    order = np.lexsort((np.arange(n), -s))  # primary: score desc, secondary: index asc
    chosen = np.sort(order[:k])
    return KeypointSet(indices=torch.as_tensor(chosen, dtype=torch.int64))
