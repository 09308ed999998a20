"""Multi-view dataset I/O: per-view PNG directories plus a camera rig file.

Layout::

    root/
      rig.json                 intrinsics, world-to-camera poses, test view
      view_00/frame_0000.png   8-bit RGB, one directory per view
      view_01/...

View 0 is the held-out test view by convention; training uses the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .core import Camera

RIG_FILENAME = "rig.json"


@dataclass
class MultiViewDataset:
    cams: list[Camera]
    frames: list[list[Tensor]]      # [frame][view] H,W,3 float in [0,1]
    test_view: int = 0

    def __post_init__(self):
        v = len(self.cams)
        if not (0 <= self.test_view < v):
            raise ValueError("test view index out of range")
        for t, views in enumerate(self.frames):
            if len(views) != v:
                raise ValueError(f"frame {t} has {len(views)} views, rig has {v}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_views(self) -> int:
        return len(self.cams)

    @property
    def train_indices(self) -> list[int]:
        return [i for i in range(self.n_views) if i != self.test_view]

    @property
    def train_cams(self) -> list[Camera]:
        return [self.cams[i] for i in self.train_indices]

    def train_images(self, t: int) -> list[Tensor]:
        return [self.frames[t][i] for i in self.train_indices]

    @property
    def test_cam(self) -> Camera:
        return self.cams[self.test_view]

    def test_image(self, t: int) -> Tensor:
        return self.frames[t][self.test_view]


def _cam_to_dict(cam: Camera) -> dict:
    return {
        "R": cam.R.tolist(),
        "t": cam.t.tolist(),
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
    }


def _cam_from_dict(d: dict, width: int, height: int) -> Camera:
    return Camera(
        R=torch.tensor(d["R"], dtype=torch.float32),
        t=torch.tensor(d["t"], dtype=torch.float32),
        fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
        width=width, height=height,
    )


def save_image(path: Path, img: Tensor):
    arr = (img.detach().clamp(0.0, 1.0) * 255.0 + 0.5).to(torch.uint8).numpy()
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: Path) -> Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def save_dataset(root: str | Path, cams: list[Camera], frames: list[list[Tensor]], test_view: int = 0):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    h, w = int(cams[0].height), int(cams[0].width)
    rig = {
        "width": w,
        "height": h,
        "test_view": test_view,
        "views": [_cam_to_dict(c) for c in cams],
    }
    (root / RIG_FILENAME).write_text(json.dumps(rig, indent=2))
    for v in range(len(cams)):
        vdir = root / f"view_{v:02d}"
        vdir.mkdir(exist_ok=True)
        for t, views in enumerate(frames):
            save_image(vdir / f"frame_{t:04d}.png", views[v])


def load_rig(root: str | Path) -> tuple[list[Camera], int]:
    """Cameras and test-view index only, without touching the image files."""
    rig = json.loads((Path(root) / RIG_FILENAME).read_text())
    w, h = int(rig["width"]), int(rig["height"])
    return [_cam_from_dict(d, w, h) for d in rig["views"]], int(rig.get("test_view", 0))


def load_dataset(root: str | Path) -> MultiViewDataset:
    root = Path(root)
    rig_path = root / RIG_FILENAME
    if not rig_path.is_file():
        raise FileNotFoundError(f"no {RIG_FILENAME} under {root}")
    rig = json.loads(rig_path.read_text())
    w, h = int(rig["width"]), int(rig["height"])
    cams = [_cam_from_dict(d, w, h) for d in rig["views"]]
    test_view = int(rig.get("test_view", 0))

    frame_files = sorted((root / "view_00").glob("frame_*.png"))
    if not frame_files:
        raise FileNotFoundError(f"no frames under {root / 'view_00'}")
    frames = []
    for t, f in enumerate(frame_files):
        views = []
        for v in range(len(cams)):
            p = root / f"view_{v:02d}" / f.name
            if not p.is_file():
                raise FileNotFoundError(f"missing {p}")
            views.append(load_image(p))
        frames.append(views)
    return MultiViewDataset(cams=cams, frames=frames, test_view=test_view)
