"""Command-line interface.

Subcommands: lift (full pipeline), finetune (adapt a prior to one image),
render (orbit frames from a checkpoint), eval (embedding distances of
frames vs. a reference), synth-scene (analytic test scenes), and
train-toy-prior (fit the toy denoiser + encoders on a scene directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

log = logging.getLogger(__name__)


def _load_run_config(path):
    from .config import RunConfig, load_config

    return load_config(path) if path else RunConfig()


def cmd_lift(args) -> int:
    from .dataio import load_reference, save_checkpoint
    from .pipeline import lift, load_prior

    cfg = _load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    bundle = load_reference(args.image, args.depth, args.prompt,
                            background_valid=args.trust_background)

    prior = None
    prior_path = None
    if not args.no_prior:
        prior_path = args.prior or cfg.prior.checkpoint_path
        if prior_path is None:
            raise SystemExit("lift: a prior checkpoint is required unless --no-prior is set "
                             "(pass --prior or set prior.checkpoint_path in the config)")
        prior = load_prior(prior_path)

    out = Path(args.out)
    result = lift(bundle, cfg, prior=prior, no_prior=args.no_prior,
                  no_finetune=args.no_finetune, out_dir=out, prior_path=prior_path)
    save_checkpoint(out / "checkpoint.pkl", result.train.checkpoint)
    log.info("lift finished: %d steps, %d skipped; checkpoint at %s",
             cfg.train.total_steps, result.train.skipped_steps, out / "checkpoint.pkl")
    return 0


def cmd_finetune(args) -> int:
    from .adaptation import finetune_denoiser, optimize_embedding
    from .dataio import load_png
    from .pipeline import load_prior, save_prior

    cfg = _load_run_config(args.config)
    prior = load_prior(args.prior)
    rgb = load_png(args.image)
    sched = prior.schedule()
    ft_cfg = cfg.adaptation.to_finetune_config(cfg.diffusion.t_lo, cfg.diffusion.t_hi)
    gen = torch.Generator().manual_seed(cfg.seed * 1003 + 9)
    with torch.no_grad():
        z = prior.encoders.embed_text(args.prompt)
    z_star = optimize_embedding(prior.denoiser, rgb, z, sched, prior.encoders, ft_cfg, gen)
    adapted = finetune_denoiser(prior.denoiser, rgb, z_star, sched, prior.encoders, ft_cfg, gen)

    prior.denoiser = adapted
    prior.z_original = z
    prior.z_star = z_star
    save_prior(args.out, prior)
    log.info("adapted prior written to %s", args.out)
    return 0


def cmd_render(args) -> int:
    from .dataio import load_checkpoint
    from .pipeline import render_orbit

    ckpt = load_checkpoint(args.checkpoint)
    manifest = render_orbit(ckpt, args.out, n_views=args.views, radius=args.radius,
                            resolution=args.resolution)
    log.info("rendered %d frames to %s", len(manifest["frames"]), args.out)
    return 0


def cmd_eval(args) -> int:
    from .dataio import load_png, write_report
    from .pipeline import evaluate_frames, load_prior

    prior = load_prior(args.prior)
    reference = load_png(args.reference)
    report = evaluate_frames(args.frames, reference, prior.eval_encoders)
    write_report(args.out, report)
    log.info("mean distance %.4f over %d frames -> %s",
             report["mean_clip_distance"], len(report["frames"]), args.out)
    return 0


def cmd_synth_scene(args) -> int:
    from .cameras import PoseDistributionConfig, sample_orbit_pose
    from .dataio import save_rgba_png, write_depth_raster
    from .rendering import Intrinsics
    from .scenes import synth_scene

    out = Path(args.out)
    g = torch.Generator().manual_seed(args.seed)
    pose_cfg = PoseDistributionConfig(pose_noise_rot=0.0, pose_noise_trans=0.0)

    def write_one(directory: Path, pose, intr):
        directory.mkdir(parents=True, exist_ok=True)
        scene = synth_scene(args.shape, args.seed, pose, intr, color=args.color)
        save_rgba_png(directory / "reference.png", scene.rgb, scene.mask)
        write_depth_raster(directory / "depth.dpt", scene.depth.numpy())
        meta = {"prompt": scene.prompt, "shape": args.shape, "color": args.color,
                "texture_seed": args.seed, "background_valid": True}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    intr = Intrinsics(60.0, args.resolution, args.resolution)
    if args.views <= 1:
        from .cameras import reference_pose

        pose, _ = reference_pose(pose_cfg, args.resolution, args.resolution)
        write_one(out, pose, intr)
    else:
        for v in range(args.views):
            pose, _ = sample_orbit_pose(pose_cfg, g, args.resolution, args.resolution)
            write_one(out / f"view_{v:02d}", pose, intr)
    log.info("synthetic scene written to %s", out)
    return 0


def cmd_train_toy_prior(args) -> int:
    from .dataio import DataFormatError, load_png
    from .pipeline import build_toy_prior, save_prior
    from .scenes import SceneFamily

    cfg = _load_run_config(args.config)
    scenes_dir = Path(args.scenes)
    metas = sorted(scenes_dir.rglob("meta.json"))
    if not metas:
        raise DataFormatError(f"{scenes_dir}: no scenes found (expected meta.json files)")
    images, prompts = [], []
    for meta_path in metas:
        meta = json.loads(meta_path.read_text())
        rgb = load_png(meta_path.parent / "reference.png")
        images.append(rgb.permute(2, 0, 1))
        prompts.append(meta["prompt"])
    from .imageops import resize_chw

    res = cfg.prior.native_resolution
    stack = torch.stack([resize_chw(img, res) for img in images])
    # Hold out every eighth view for the sanity checks.
    hold = torch.zeros(len(prompts), dtype=torch.bool)
    hold[::8] = True
    family = SceneFamily(
        images=stack[~hold],
        prompts=[p for p, h in zip(prompts, hold) if not h],
        heldout_images=stack[hold],
        heldout_prompts=[p for p, h in zip(prompts, hold) if h],
    )
    prior = build_toy_prior(family, cfg, seed=cfg.seed,
                            encoder_steps=args.encoder_steps,
                            denoiser_steps=args.denoiser_steps)
    save_prior(args.out, prior)
    log.info("toy prior trained on %d views -> %s", len(prompts), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lift3d",
                                     description="Lift a segmented photo to a 360-degree object")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lift", help="run the full lifting pipeline")
    p.add_argument("--image", required=True, help="RGBA reference PNG (alpha marks foreground)")
    p.add_argument("--depth", required=True, help="pseudo-depth raster (.dpt or 16-bit PNG)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--prior", default=None, help="prior bundle (overrides config path)")
    p.add_argument("--no-prior", action="store_true")
    p.add_argument("--no-finetune", action="store_true")
    p.add_argument("--trust-background", action="store_true",
                   help="treat the reference background pixels as supervision targets")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("finetune", help="adapt a prior to a single image")
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("render", help="render an orbit from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", type=int, default=100)
    p.add_argument("--radius", type=float, default=1.25)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score rendered frames against a reference")
    p.add_argument("--frames", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--prior", required=True, help="prior bundle providing the eval encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-scene", help="generate an analytic test scene")
    p.add_argument("--shape", choices=("sphere", "cube"), default="sphere")
    p.add_argument("--color", default="red")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--views", type=int, default=1,
                   help="write this many orbit views as view_## subdirectories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("train-toy-prior", help="train the toy prior on synthetic scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--encoder-steps", type=int, default=600)
    p.add_argument("--denoiser-steps", type=int, default=800)
    p.set_defaults(func=cmd_train_toy_prior)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
