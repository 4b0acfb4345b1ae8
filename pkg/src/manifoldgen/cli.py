"""Command-line surface: train / render / extract / bake / synth / serve.

Exit codes: 0 success, 2 config schema violation (message names the field),
3 numeric abort during training (last checkpoint retained), 4 unreadable
checkpoint. The environment variable `GRAM_THREADS` caps torch parallelism
for every command.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, EngineConfig, from_entries, load_config
from .diffcore import NumericError, latent_from_seed
from .render import CameraIntrinsics, CameraPose, render_image, save_png

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4


def apply_thread_cap() -> None:
    """Honor GRAM_THREADS; invalid values are ignored rather than fatal."""
    raw = os.environ.get("GRAM_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return
    if n >= 1:
        torch.set_num_threads(n)


def _load_config_with_overrides(path, overrides) -> EngineConfig:
    entries = {}
    if path:
        config = load_config(path)
        entries = {k: v for k, v in config.as_dict().items()}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        entries[key.strip()] = value.strip()
    # Re-parse from scratch so overrides go through the same validation.
    raw = {k: v if isinstance(v, str) else _stringify(v) for k, v in entries.items()}
    return from_entries(raw)


def _stringify(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(repr(x) for x in v)
    return str(v)


def _load_checkpoint_or_exit(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        sys.exit(EXIT_CHECKPOINT)


def cmd_train(args) -> int:
    from . import data as data_mod
    from .gan import TrainingAborted, train

    try:
        config = _load_config_with_overrides(args.config, args.set)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    if config["dataset.kind"] == "synthetic":
        ds_dir = config["dataset.path"] or os.path.join(out_dir, "dataset")
        if not os.path.exists(os.path.join(ds_dir, "manifest.txt")):
            data_mod.synth_generate(
                ds_dir,
                count=config["dataset.count"],
                resolution=config["dataset.resolution"],
                primitive=config["dataset.primitive"],
                seed=config["seed"],
                pose_kind=config["pose.kind"],
                yaw_std=config["pose.yaw_std"],
                pitch_std=config["pose.pitch_std"],
                camera_radius=config["camera.radius"],
                fov=config.fov,
            )
    else:
        ds_dir = config["dataset.path"]
    try:
        manifest, accessor = data_mod.load_dataset(ds_dir)
    except data_mod.DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        state = train(manifest, accessor, config, out_dir)
    except TrainingAborted as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {state.iteration} iterations; checkpoints in {out_dir}")
    return 0


def _pose_intr_from_args(args, gen):
    pose = CameraPose(yaw=args.yaw, pitch=args.pitch,
                      radius=args.radius if args.radius is not None
                      else gen.camera_radius)
    intr = CameraIntrinsics(fov=args.fov, height=args.resolution,
                            width=args.resolution)
    return pose, intr


def cmd_render(args) -> int:
    config, state = _load_checkpoint_or_exit(args.checkpoint)
    gen = state.gen
    z = latent_from_seed(args.seed, gen.latent_dim)
    pose, intr = _pose_intr_from_args(args, gen)
    try:
        img = render_image(gen, z, pose, intr)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    save_png(img, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_extract(args) -> int:
    from .geometry import export_obj, extract_proxy_shape

    config, state = _load_checkpoint_or_exit(args.checkpoint)
    gen = state.gen
    z = latent_from_seed(args.seed, gen.latent_dim)
    mesh = extract_proxy_shape(gen, z, resolution=args.resolution)
    export_obj(mesh, args.out)
    print(f"wrote {args.out} ({mesh.vertices.shape[0]} vertices, "
          f"{mesh.triangles.shape[0]} triangles)")
    return 0


def cmd_bake(args) -> int:
    from .geometry import bake_radiance, export_obj, extract_manifolds

    config, state = _load_checkpoint_or_exit(args.checkpoint)
    gen = state.gen
    z = latent_from_seed(args.seed, gen.latent_dim)
    meshes = extract_manifolds(gen.field, gen.schedule,
                               resolution=args.resolution, volume=gen.volume)
    baked = bake_radiance(gen, z, meshes,
                          checkpoint_id=os.path.basename(args.checkpoint),
                          latent_seed=args.seed,
                          bake_resolution=args.resolution)
    os.makedirs(args.out, exist_ok=True)
    for i, mesh in enumerate(baked.meshes):
        obj = os.path.join(args.out, f"layer_{i:02d}.obj")
        export_obj(mesh, obj, attr_path=obj + ".attr")
    print(f"wrote {len(baked.meshes)} layers to {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .data import synth_generate

    manifest = synth_generate(args.out, count=args.count,
                              resolution=args.resolution,
                              primitive=args.primitive, seed=args.seed)
    print(f"wrote {len(manifest)} images to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    config, state = _load_checkpoint_or_exit(args.checkpoint)
    app = build_app(state.gen, config,
                    checkpoint_id=os.path.basename(args.checkpoint))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manifoldgen",
        description="Generative radiance manifolds: training, rendering, "
                    "mesh baking and serving.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="adversarial training run")
    p.add_argument("--config", default=None, help="config file path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--yaw", type=float, default=0.0)
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--fov", type=float, default=np.radians(12.0),
                   help="field of view in radians")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract", help="export the occupancy proxy shape")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True, help="output OBJ path")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bake", help="export baked radiance layer meshes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_bake)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--primitive", default="mixed",
                   choices=["sphere", "box", "mixed"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="HTTP rendering service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
