"""Command-line interface binding all modules.

Subcommands: generate-scene | train | render | render-layers | edit |
eval | check-gradients. Exit codes: 0 success, 1 usage error, 2 runtime
failure. Every run prints its fully resolved configuration as JSON before
doing work.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="layerfields", description=__doc__)
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("generate-scene", help="emit a synthetic dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--spec", help="scene spec JSON (default: bundled blob scene)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=32)
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--mask-noise", type=float, default=0.0, help="outlier rate")
    g.add_argument("--quadrature-steps", type=int, default=2048)

    t = sub.add_parser("train", help="train a field on a dataset")
    t.add_argument("--scene", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--mode", choices=["ssd", "snerf"], default="ssd")
    t.add_argument("--iters", type=int, default=5000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--grid", type=int, default=64, help="voxel nodes per axis")
    t.add_argument("--rays", type=int, default=2048)
    t.add_argument("--samples", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--lambda-sem", type=float, default=1e-1)
    t.add_argument("--lambda-sparse", type=float, default=1e-3)
    t.add_argument("--lambda-group", type=float, default=1e-3)
    t.add_argument(
        "--upsample-at",
        default="1500,3000",
        help="comma-separated steps at which the grid doubles (coarse-to-fine); "
        "empty string disables",
    )
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--progress-every", type=int, default=500)

    r = sub.add_parser("render", help="render one view of a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera", required=True, help="cameras.json#INDEX")
    r.add_argument("--out", required=True, help="output PNG path")
    r.add_argument("--samples", type=int, default=128)

    rl = sub.add_parser("render-layers", help="per-layer renders, masks, depth")
    rl.add_argument("--checkpoint", required=True)
    rl.add_argument("--camera", required=True, help="cameras.json#INDEX")
    rl.add_argument("--out", required=True, help="output directory")
    rl.add_argument("--samples", type=int, default=128)

    e = sub.add_parser("edit", help="render an edited field over a camera path")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--edit", required=True, help="edit spec JSON")
    e.add_argument(
        "--cameras",
        required=True,
        help="cameras.json[#INDEX] or dolly:start=cameras.json#0,target=D,frames=N[,travel=T]",
    )
    e.add_argument("--out", required=True, help="output directory for frames")
    e.add_argument("--samples", type=int, default=128)

    ev = sub.add_parser("eval", help="PSNR / mIoU report on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--scene", required=True, help="dataset directory")
    ev.add_argument("--split", default="val")
    ev.add_argument("--out", required=True, help="report JSON path")
    ev.add_argument("--samples", type=int, default=128)

    c = sub.add_parser("check-gradients", help="finite-difference gradient suites")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--cases", type=int, default=200)
    return p


def _echo_config(args: argparse.Namespace):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config " + json.dumps(cfg, sort_keys=True), flush=True)


def _parse_camera_ref(ref: str):
    if "#" in ref:
        path, _, idx = ref.partition("#")
        return path, int(idx)
    return ref, None


def _load_camera(ref: str):
    from .dataio import load_cameras

    path, idx = _parse_camera_ref(ref)
    cams = load_cameras(path)
    return cams[idx if idx is not None else 0]


def _cmd_generate_scene(args) -> int:
    from . import scenegen

    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec = scenegen.SceneSpec.from_dict(json.load(fh))
        if args.mask_noise:
            spec.noise.outlier_rate = args.mask_noise
    else:
        spec = scenegen.two_blob_scene(
            noise_rate=args.mask_noise, views=args.views, image_size=args.image_size
        )
    rng = np.random.default_rng(args.seed)
    manifest = scenegen.emit_dataset(
        spec, args.out, rng=rng, quadrature_steps=args.quadrature_steps
    )
    print(f"wrote {len(manifest['files'])} files to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .dataio import load_dataset
    from .losses import LossConfig
    from .trainer import TrainConfig, Trainer

    dataset = load_dataset(args.scene)
    upsample = tuple(
        int(s) for s in str(args.upsample_at).split(",") if s.strip()
    )
    cfg = TrainConfig(
        rays_per_batch=args.rays,
        iterations=args.iters,
        learning_rate=args.lr,
        seed=args.seed,
        deterministic=args.deterministic,
        n_samples=args.samples,
        grid_resolution=(args.grid, args.grid, args.grid),
        mode=args.mode,
        checkpoint_every=args.checkpoint_every,
        upsample_at=upsample,
        loss=LossConfig(
            lambda_sem=args.lambda_sem,
            lambda_sparse=args.lambda_sparse,
            lambda_group=args.lambda_group,
        ),
    )
    trainer = Trainer(dataset, cfg)
    out = Path(args.out)
    trainer.run(
        out_dir=out,
        log_path=out / "train_log.jsonl",
        progress_every=args.progress_every,
    )
    print(f"final checkpoint: {out / 'checkpoint_final.ckpt'}")
    return 0


def _cmd_render(args) -> int:
    from .dataio import save_png_rgb8
    from .field import load_checkpoint
    from .render import render_view

    field, _ = load_checkpoint(args.checkpoint)
    cam = _load_camera(args.camera)
    out = render_view(field, cam, n_samples=args.samples)
    save_png_rgb8(args.out, out.color)
    print(f"wrote {args.out}")
    return 0


def _cmd_render_layers(args) -> int:
    from .dataio import save_png_gray16, save_png_rgb8
    from .field import load_checkpoint
    from .render import render_layer_view, render_view

    field, _ = load_checkpoint(args.checkpoint)
    cam = _load_camera(args.camera)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = render_view(field, cam, n_samples=args.samples)
    save_png_rgb8(out_dir / "full.png", full.color)
    depth_scale = np.clip(full.depth / cam.t_far, 0.0, 1.0)
    save_png_gray16(out_dir / "depth.png", depth_scale)
    for i, name in enumerate(field.class_set.names):
        layer = render_layer_view(field, cam, i, n_samples=args.samples)
        save_png_rgb8(out_dir / f"layer_{name}.png", layer.color)
        save_png_gray16(out_dir / f"mask_{name}.png", np.clip(full.sem_mask[..., i], 0, 1))
    print(f"wrote layer renders to {out_dir}")
    return 0


def _parse_dolly(ref: str):
    body = ref[len("dolly:") :]
    fields = dict(part.split("=", 1) for part in body.split(",") if part)
    if "start" not in fields or "target" not in fields or "frames" not in fields:
        raise ValueError("dolly path needs start=, target=, frames=")
    start = _load_camera(fields["start"])
    travel = float(fields["travel"]) if "travel" in fields else None
    return start, float(fields["target"]), int(fields["frames"]), travel


def _cmd_edit(args) -> int:
    from .editing import EditSpec, dolly_zoom_path, render_edited, save_frames
    from .field import load_checkpoint

    field, _ = load_checkpoint(args.checkpoint)
    edit = EditSpec.load(args.edit, field.class_set)
    if args.cameras.startswith("dolly:"):
        start, target, frames, travel = _parse_dolly(args.cameras)
        cams = dolly_zoom_path(start, target, frames, travel=travel)
    else:
        from .dataio import load_cameras

        path, idx = _parse_camera_ref(args.cameras)
        cams = load_cameras(path)
        if idx is not None:
            cams = [cams[idx]]
    outputs = [render_edited(field, cam, edit, n_samples=args.samples) for cam in cams]
    save_frames(args.out, outputs)
    print(f"wrote {len(outputs)} frames to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .dataio import load_dataset
    from .field import load_checkpoint
    from .metrics import evaluate_field

    field, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.scene)
    report = evaluate_field(field, dataset, split=args.split, n_samples=args.samples)
    report.save(args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _cmd_check_gradients(args) -> int:
    from .gradcheck import run_all

    results = run_all(seed=args.seed, cases=args.cases)
    worst = max(results.values())
    for name, value in sorted(results.items()):
        print(f"{name}: max rel error {value:.3e}")
    print(f"overall max rel error {worst:.3e}")
    return 0 if worst < 1e-4 else 2


_COMMANDS = {
    "generate-scene": _cmd_generate_scene,
    "train": _cmd_train,
    "render": _cmd_render,
    "render-layers": _cmd_render_layers,
    "edit": _cmd_edit,
    "eval": _cmd_eval,
    "check-gradients": _cmd_check_gradients,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    _echo_config(args)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures -> exit 2 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
