"""Regenerate the viewer conformance fixtures from the encoder package.

Builds a small deterministic stream exercising every payload kind (INIT,
fitted-shape MOTION records, an empty MOTION, a KEYCORR with residuals and
a rotation increment near the degenerate threshold, an empty KEYCORR),
then dumps, per record, the server's decoded snapshot bytes. Run from the
frontend directory:

    python3 scripts/make_fixtures.py

Requires the gstream package (pip install -e .. --no-build-isolation).
"""

import json
import pathlib

import numpy as np
import torch

from gstream.codec import (
    InitPayload,
    KeycorrPayload,
    MotionPayload,
    StreamHeader,
)
from gstream.corrector import MaskedResiduals
from gstream.core import SceneState
from gstream.motion import Keypoint, MotionField
from gstream.stream import (
    TAG_WIRE_HEADER,
    SenderSession,
    frame_message,
    pack_wire_header,
    snapshot_bytes,
)

OUT = pathlib.Path(__file__).resolve().parent.parent / "test" / "fixtures"

N = 40
FPS = 8.0


def build_scene(rng: np.random.Generator) -> SceneState:
    f32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))
    q = rng.normal(size=(N, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return SceneState(
        mu=f32(rng.uniform(-0.8, 0.8, size=(N, 3))),
        q=f32(q),
        log_s=f32(rng.uniform(np.log(0.05), np.log(0.15), size=(N, 3))),
        logit_sigma=f32(rng.uniform(-0.5, 1.5, size=N)),
        sh=f32(rng.uniform(-0.6, 0.6, size=(N, 4, 3))),
    )


def build_motion(rng: np.random.Generator, indices) -> MotionField:
    kps = []
    for idx in indices:
        dq = np.array([1.0, 0.0, 0.0, 0.0]) + rng.normal(0, 0.05, 4)
        dq /= np.linalg.norm(dq)
        qa = rng.normal(size=4)
        qa /= np.linalg.norm(qa)
        kps.append(
            Keypoint(
                index=int(idx),
                delta_mu=rng.normal(0, 0.04, 3).astype(np.float32),
                delta_q=dq.astype(np.float32),
                q_adap=qa.astype(np.float32),
                s_adap=rng.uniform(0.25, 0.6, 3).astype(np.float32),
            )
        )
    return MotionField(keypoints=kps, tau_adap=0.01)


def build_keycorr(rng: np.random.Generator) -> MaskedResiduals:
    rows = np.sort(rng.choice(N, size=5, replace=False))
    hard = torch.zeros(N, dtype=torch.bool)
    hard[torch.from_numpy(rows)] = True
    m = len(rows)
    f32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))
    d_q = rng.normal(0, 0.03, (m, 4))
    d_q[:, 0] += 1.0
    d_q[2] = [1e-10, 0.0, 0.0, 0.0]  # exercises the degenerate-increment path
    return MaskedResiduals(
        hard=hard,
        d_mu=f32(rng.normal(0, 0.05, (m, 3))),
        d_q=f32(d_q),
        d_log_s=f32(rng.normal(0, 0.05, (m, 3))),
        d_logit_sigma=f32(rng.normal(0, 0.2, m)),
        d_sh=f32(rng.normal(0, 0.08, (m, 4, 3))),
    )


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    scene0 = build_scene(rng)

    header = StreamHeader(n_points=N, gof_interval=3, k=2, tau_adap=0.01, phi_thres=0.5)
    sender = SenderSession(header)
    payloads = [
        InitPayload(scene0),
        MotionPayload(build_motion(rng, [4, 17])),
        MotionPayload(MotionField(keypoints=[], tau_adap=0.01)),
        KeycorrPayload(build_keycorr(rng)),
        MotionPayload(build_motion(rng, [9])),
        MotionPayload(build_motion(rng, [2, 33])),
        KeycorrPayload(MaskedResiduals.empty(N)),
    ]
    messages = []
    for i, payload in enumerate(payloads):
        tag, body = sender.push(payload)
        messages.append(frame_message(tag, body))
        snap = snapshot_bytes(sender.scene, i)
        (OUT / f"snapshot_{i:03d}.bin").write_bytes(snap)

    container = sender.container()
    (OUT / "stream.cgs").write_bytes(container)

    wire = frame_message(TAG_WIRE_HEADER, pack_wire_header(header, 0)) + b"".join(messages)
    (OUT / "wire.bin").write_bytes(wire)

    doc = {
        "n_points": N,
        "sh_degree": 1,
        "gof_interval": 3,
        "k": 2,
        "tau_adap": header.tau_adap,
        "phi_thres": header.phi_thres,
        "frame_count": len(payloads),
        "current_frame": 0,
        "fps": FPS,
    }
    (OUT / "header.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {len(payloads)} snapshots + stream.cgs ({len(container)} B) to {OUT}")


if __name__ == "__main__":
    main()
