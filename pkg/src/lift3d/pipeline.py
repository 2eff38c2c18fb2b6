"""End-to-end orchestration: toy prior building, adaptation, lifting,
orbit rendering, and evaluation.

The prior bundle packages a trained toy denoiser with the guidance
encoder pair and a separately seeded evaluation encoder pair; lifting
optionally adapts the prior to the reference image before the main
training loop.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import pickle
from dataclasses import dataclass
from pathlib import Path

import torch

from .adaptation import (
    GuidanceSampler,
    build_guidance_sampler,
    finetune_denoiser,
    interpolate_embedding,
    optimize_embedding,
)
from .cameras import look_at_pose
from .config import RunConfig
from .dataio import (
    Checkpoint,
    DataFormatError,
    ReferenceBundle,
    load_png,
    save_png,
    write_report,
)
from .diffusion import NoiseSchedule, ToyDenoiser, train_toy_denoiser
from .encoders import EncoderPair, clip_distance, make_encoder_pair, train_contrastive
from .losses import sample_ranking_pairs
from .rendering import Intrinsics, render_view
from .scenes import SceneFamily, make_scene_family
from .training import TrainResult, scene_from_checkpoint, train_lift

log = logging.getLogger(__name__)

PRIOR_VERSION = 1


@dataclass
class PriorBundle:
    """A toy diffusion prior: denoiser, guidance encoders, eval encoders.

    ``z_original``/``z_star`` are populated when the bundle was adapted to
    a reference image by the standalone finetune step; lifting with
    ``no_finetune`` reuses them instead of re-running adaptation.
    """

    denoiser: ToyDenoiser
    encoders: EncoderPair
    eval_encoders: EncoderPair
    schedule_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    z_original: torch.Tensor | None = None
    z_star: torch.Tensor | None = None

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule_steps, self.beta_start, self.beta_end)


def save_prior(path, prior: PriorBundle) -> None:
    def enc_payload(pair: EncoderPair):
        return {
            "image_state": {k: v.numpy() for k, v in pair.image.state_dict().items()},
            "text_state": {k: v.numpy() for k, v in pair.text.state_dict().items()},
            "embed_dim": pair.embed_dim,
            "native_resolution": pair.image.native_resolution,
        }

    payload = {
        "version": PRIOR_VERSION,
        "denoiser": {
            "state": {k: v.numpy() for k, v in prior.denoiser.state_dict().items()},
            "native_resolution": prior.denoiser.native_resolution,
            "embed_dim": prior.denoiser.embed_dim,
            "channels": prior.denoiser.conv_in.out_channels,
            "time_steps": prior.denoiser.time_steps,
        },
        "encoders": enc_payload(prior.encoders),
        "eval_encoders": enc_payload(prior.eval_encoders),
        "schedule": {
            "steps": prior.schedule_steps,
            "beta_start": prior.beta_start,
            "beta_end": prior.beta_end,
        },
        "z_original": prior.z_original.numpy() if prior.z_original is not None else None,
        "z_star": prior.z_star.numpy() if prior.z_star is not None else None,
    }
    with open(path, "wb") as f:
        pickle.dump(payload, f, protocol=4)


def load_prior(path) -> PriorBundle:
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if payload.get("version") != PRIOR_VERSION:
        raise DataFormatError(f"{path}: unsupported prior version {payload.get('version')}")

    def make_pair(data) -> EncoderPair:
        pair = make_encoder_pair(data["embed_dim"], data["native_resolution"])
        pair.image.load_state_dict({k: torch.from_numpy(v) for k, v in data["image_state"].items()})
        pair.text.load_state_dict({k: torch.from_numpy(v) for k, v in data["text_state"].items()})
        return pair

    d = payload["denoiser"]
    denoiser = ToyDenoiser(
        native_resolution=d["native_resolution"],
        embed_dim=d["embed_dim"],
        channels=d["channels"],
        time_steps=d["time_steps"],
    )
    denoiser.load_state_dict({k: torch.from_numpy(v) for k, v in d["state"].items()})
    s = payload["schedule"]

    def maybe_tensor(key):
        value = payload.get(key)
        return torch.from_numpy(value) if value is not None else None

    return PriorBundle(
        denoiser=denoiser,
        encoders=make_pair(payload["encoders"]),
        eval_encoders=make_pair(payload["eval_encoders"]),
        schedule_steps=s["steps"],
        beta_start=s["beta_start"],
        beta_end=s["beta_end"],
        z_original=maybe_tensor("z_original"),
        z_star=maybe_tensor("z_star"),
    )


def build_toy_prior(
    family: SceneFamily | None = None,
    cfg: RunConfig | None = None,
    seed: int = 0,
    encoder_steps: int = 600,
    denoiser_steps: int = 800,
) -> PriorBundle:
    """Train the toy prior on a synthetic scene family.

    The guidance and evaluation encoder pairs get distinct seeds and
    training splits so reported distances never reuse the training-time
    embedding space.
    """
    cfg = cfg or RunConfig()
    if family is None:
        family = make_scene_family(resolution=cfg.prior.native_resolution, seed=seed)
    pair = make_encoder_pair(cfg.prior.embed_dim, cfg.prior.native_resolution, seed=seed * 7 + 11)
    train_contrastive(pair, family.images, family.prompts, steps=encoder_steps,
                      generator=torch.Generator().manual_seed(seed * 7 + 12))

    eval_pair = make_encoder_pair(cfg.prior.embed_dim, cfg.prior.native_resolution, seed=seed * 7 + 501)
    half = family.images.shape[0] // 2
    train_contrastive(eval_pair, family.images[half:], family.prompts[half:], steps=encoder_steps,
                      generator=torch.Generator().manual_seed(seed * 7 + 502))

    denoiser = ToyDenoiser(
        native_resolution=cfg.prior.native_resolution,
        embed_dim=cfg.prior.embed_dim,
        channels=cfg.prior.channels,
        time_steps=cfg.diffusion.steps,
        generator=torch.Generator().manual_seed(seed * 7 + 21),
    )
    with torch.no_grad():
        embeds = torch.stack([pair.embed_text(p) for p in family.prompts])
    train_toy_denoiser(
        denoiser,
        2.0 * family.images - 1.0,
        embeds,
        cfg.diffusion.to_schedule(),
        steps=denoiser_steps,
        generator=torch.Generator().manual_seed(seed * 7 + 22),
    )
    return PriorBundle(
        denoiser=denoiser,
        encoders=pair,
        eval_encoders=eval_pair,
        schedule_steps=cfg.diffusion.steps,
        beta_start=cfg.diffusion.beta_start,
        beta_end=cfg.diffusion.beta_end,
    )


@dataclass
class LiftResult:
    train: TrainResult
    adapted_denoiser: ToyDenoiser | None = None
    z: torch.Tensor | None = None
    z_star: torch.Tensor | None = None
    z_prime: torch.Tensor | None = None


def lift(
    bundle: ReferenceBundle,
    cfg: RunConfig,
    prior: PriorBundle | None = None,
    no_prior: bool = False,
    no_finetune: bool = False,
    out_dir=None,
    prior_path: str | None = None,
) -> LiftResult:
    """Full lifting pipeline: optional adaptation, then scene optimization.

    ``no_prior`` disables the orbit regime entirely (the camera schedule is
    forced to the reference view); ``no_finetune`` keeps the pristine prior
    and the raw prompt embedding.
    """
    if no_prior or prior is None:
        if prior is None and not no_prior and (cfg.camera.lambda_start > 0 or cfg.camera.lambda_end > 0):
            raise ValueError("orbit regime requires a prior bundle; pass one or set no_prior")
        run_cfg = copy.deepcopy(cfg)
        run_cfg.camera.lambda_start = 0.0
        run_cfg.camera.lambda_end = 0.0
        result = train_lift(bundle, run_cfg, out_dir=out_dir)
        return LiftResult(train=result)

    sched = prior.schedule()
    if (prior.schedule_steps, prior.beta_start, prior.beta_end) != (
        cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end,
    ):
        raise ValueError("prior bundle schedule does not match the run configuration")

    with torch.no_grad():
        z = prior.encoders.embed_text(bundle.prompt)
        y_embed = prior.encoders.embed_image(bundle.rgb.permute(2, 0, 1))

    ft_cfg = cfg.adaptation.to_finetune_config(cfg.diffusion.t_lo, cfg.diffusion.t_hi)
    adapt_gen = torch.Generator().manual_seed(cfg.seed * 1003 + 9)
    if no_finetune or not cfg.adaptation.enabled:
        denoiser = prior.denoiser
        z_star = prior.z_star  # populated when the bundle was pre-adapted
        if z_star is not None:
            z_prime = interpolate_embedding(z_star, z, ft_cfg.eta)
            sampler = build_guidance_sampler(z_prime, z, ft_cfg)
        else:
            z_prime = z
            sampler = GuidanceSampler(z_prime=z, z_original=z, fraction=0.0)
    else:
        z_star = optimize_embedding(prior.denoiser, bundle.rgb, z, sched,
                                    prior.encoders, ft_cfg, adapt_gen)
        denoiser = finetune_denoiser(prior.denoiser, bundle.rgb, z_star, sched,
                                     prior.encoders, ft_cfg, adapt_gen)
        z_prime = interpolate_embedding(z_star, z, ft_cfg.eta)
        sampler = build_guidance_sampler(z_prime, z, ft_cfg)

    embeddings = {"z": z}
    if z_star is not None:
        embeddings["z_star"] = z_star
    embeddings["z_prime"] = z_prime

    result = train_lift(
        bundle, cfg,
        denoiser=denoiser,
        encoder=prior.encoders,
        sampler=sampler,
        y_embed=y_embed,
        embeddings=embeddings,
        out_dir=out_dir,
        prior_path=prior_path,
    )
    return LiftResult(train=result, adapted_denoiser=denoiser, z=z, z_star=z_star,
                      z_prime=z_prime)


def orbit_pose(azimuth_deg: float, elevation_deg: float, radius: float):
    a = math.radians(azimuth_deg)
    e = math.radians(elevation_deg)
    position = torch.tensor([
        radius * math.cos(e) * math.sin(a),
        radius * math.sin(e),
        radius * math.cos(e) * math.cos(a),
    ])
    return look_at_pose(position)


def render_orbit(
    ckpt: Checkpoint,
    out_dir,
    n_views: int = 100,
    radius: float = 1.25,
    resolution: int = 128,
    elevation_deg: float | None = None,
) -> dict:
    """Render equally spaced azimuths at fixed elevation and write frames.

    Shading is disabled at inference. Each frame render depends only on the
    checkpoint and its pose, so frames could run concurrently; they are
    written as ``frame_####.png`` plus a ``manifest.json`` listing poses.
    """
    field, bg, cfg = scene_from_checkpoint(ckpt)
    if elevation_deg is None:
        elevation_deg = cfg.evaluation.elevation_deg
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    intr = Intrinsics(cfg.camera.reference_fov, resolution, resolution)
    frames = []
    with torch.no_grad():
        for k in range(n_views):
            azimuth = 360.0 * k / n_views
            pose = orbit_pose(azimuth, elevation_deg, radius)
            out = render_view(
                field, bg, pose, intr,
                cfg.renderer.to_shading_config("none"),
                samples_per_ray=cfg.renderer.samples_per_ray,
                generator=None,
                near_clip=cfg.renderer.near_clip,
            )
            name = f"frame_{k:04d}.png"
            save_png(out_dir / name, out.rgb)
            frames.append({"name": name, "azimuth_deg": azimuth})
    manifest = {
        "radius": radius,
        "elevation_deg": elevation_deg,
        "fov_degrees": cfg.camera.reference_fov,
        "resolution": resolution,
        "frames": frames,
    }
    write_report(out_dir / "manifest.json", manifest)
    return manifest


def evaluate_frames(frames_dir, reference: torch.Tensor, encoder) -> dict:
    """Embedding distance of every frame to the reference, plus the mean."""
    frames_dir = Path(frames_dir)
    paths = sorted(frames_dir.glob("frame_*.png"))
    if not paths:
        raise DataFormatError(f"{frames_dir}: no frames to evaluate")
    rows = []
    for p in paths:
        rows.append({"name": p.name, "clip_distance": clip_distance(encoder, load_png(p), reference)})
    mean = sum(r["clip_distance"] for r in rows) / len(rows)
    return {"frames": rows, "mean_clip_distance": mean}


def depth_pair_violation_rate(
    rendered_depth: torch.Tensor,
    gt_depth: torch.Tensor,
    mask: torch.Tensor,
    count: int = 4096,
    tie_tol: float = 1e-3,
    seed: int = 1234,
) -> float:
    """Fraction of ground-truth-ordered pixel pairs the rendered depth flips."""
    pairs = sample_ranking_pairs(gt_depth, mask, count, tie_tol,
                                 torch.Generator().manual_seed(seed))
    if len(pairs) == 0:
        return 0.0
    flat = rendered_depth.reshape(-1)
    delta = flat[pairs.second] - flat[pairs.first]
    violated = (pairs.relation.to(rendered_depth.dtype) * delta) > 0
    return violated.float().mean().item()
