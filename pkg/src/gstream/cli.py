"""Command line: synth, init, encode, decode, render, stats, serve."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .datasets import load_dataset, load_rig, save_dataset, save_image
from .pipeline import (
    EncodeConfig,
    decode_stream,
    encode_sequence,
    fit_first_frame,
    load_scene,
    psnr,
    read_config,
    render_scene,
    save_scene,
    stats_rows,
    write_stats_csv,
)
from .stream import StreamServer
from .synth import SynthConfig, make_scene, perturb_scene

log = logging.getLogger(__name__)


def _config_from_args(args) -> EncodeConfig:
    cfg = read_config(args.config) if args.config else EncodeConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _parse_vec3(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return tuple(parts)


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_points=args.points,
        n_moving=args.moving,
        n_views=args.views,
        image_size=args.size,
        n_frames=args.frames,
        program=args.program,
        translation=args.translation,
        rotation_deg=args.rotation_deg,
        appear_frame=args.appear_frame,
        seed=args.seed if args.seed is not None else 0,
    )
    scene = make_scene(cfg)
    save_dataset(args.out, scene.cams, scene.images, test_view=0)
    init = perturb_scene(scene.scenes[0], seed=cfg.seed + 1, pos_sigma=args.init_noise)
    init_path = args.init_out or (Path(args.out) / "init_points.npz")
    save_scene(init_path, init)
    print(f"dataset: {args.out} ({cfg.n_frames} frames, {cfg.n_views} views, {cfg.n_points} points)")
    print(f"initial points: {init_path}")
    return 0


def cmd_init(args) -> int:
    cfg = _config_from_args(args)
    dataset = load_dataset(args.data)
    init = load_scene(args.points)
    scene0 = fit_first_frame(dataset, init, cfg)
    save_scene(args.out, scene0)
    quality = psnr(render_scene(scene0, dataset.test_cam), dataset.test_image(0))
    print(f"fitted frame 0: {scene0.n_points} points, test-view PSNR {quality:.2f} dB -> {args.out}")
    return 0


def cmd_encode(args) -> int:
    cfg = _config_from_args(args)
    dataset = load_dataset(args.data)
    scene0 = load_scene(args.scene)
    container = encode_sequence(dataset, scene0, cfg)
    Path(args.out).write_bytes(container)
    print(f"encoded {dataset.n_frames} frames -> {args.out} ({len(container)} bytes)")
    return 0


def cmd_decode(args) -> int:
    container = Path(args.stream).read_bytes()
    header, scenes = decode_stream(container)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, scene in enumerate(scenes):
        save_scene(out_dir / f"frame_{t:04d}.npz", scene)
    print(f"decoded {len(scenes)} frames ({header.n_points} points each) -> {out_dir}")
    return 0


def cmd_render(args) -> int:
    container = Path(args.stream).read_bytes()
    _, scenes = decode_stream(container)
    if not (0 <= args.frame < len(scenes)):
        print(f"frame {args.frame} out of range (stream has {len(scenes)})", file=sys.stderr)
        return 2
    cams, _ = load_rig(args.data)
    if not (0 <= args.view < len(cams)):
        print(f"view {args.view} out of range (rig has {len(cams)})", file=sys.stderr)
        return 2
    img = render_scene(scenes[args.frame], cams[args.view])
    save_image(Path(args.out), img)
    print(f"rendered frame {args.frame} view {args.view} -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    container = Path(args.stream).read_bytes()
    dataset = load_dataset(args.data) if args.data else None
    rows = stats_rows(container, dataset)
    write_stats_csv(rows, args.out)
    total = rows[-1]["cumulative_bytes"] if rows else 0
    print(f"{len(rows)} frames, {total} bytes total -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    container = Path(args.stream).read_bytes()
    server = StreamServer(
        container,
        host=args.host,
        tcp_port=args.tcp_port,
        http_port=args.http_port,
        fps=args.fps,
        web_root=args.web,
    )
    print(f"tcp on {server.tcp_address[0]}:{server.tcp_address[1]}, "
          f"http on {server.http_address[0]}:{server.http_address[1]}")
    server.serve_until_interrupt()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gstream", description="Keypoint-driven Gaussian streaming")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--program", choices=("static", "rigid", "appear"), default="rigid")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--points", type=int, default=500)
    p.add_argument("--moving", type=int, default=50)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--translation", type=_parse_vec3, default=(0.1, 0.0, 0.0))
    p.add_argument("--rotation-deg", type=float, default=0.0)
    p.add_argument("--appear-frame", type=int, default=5)
    p.add_argument("--init-noise", type=float, default=0.05)
    p.add_argument("--init-out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", help="fit the frame-0 scene from an initial point set")
    p.add_argument("--data", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("encode", help="encode a dataset into a .cgs stream")
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True, help="fitted frame-0 scene (.npz)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode every frame to .npz scene files")
    p.add_argument("--stream", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", help="render one decoded frame from a rig view")
    p.add_argument("--stream", required=True)
    p.add_argument("--data", required=True, help="dataset directory (for the camera rig)")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("stats", help="per-frame byte and quality report")
    p.add_argument("--stream", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="serve a stream to viewers")
    p.add_argument("--stream", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--tcp-port", type=int, default=7340)
    p.add_argument("--http-port", type=int, default=7341)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--web", default=None, help="static viewer bundle directory")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
