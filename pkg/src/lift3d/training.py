"""The lifting loop: per-step regime switching, rendering, losses, Adam.

Each iteration either re-renders the fixed reference view (photometric +
ranking + smoothness supervision) or a random orbit view (prior
distillation with foreground weighting and annealed timesteps, plus the
orientation / compactness / sparsity regularizers). One optimizer step per
iteration; non-finite steps are skipped and budgeted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import torch

from . import losses
from .adaptation import GuidanceSampler
from .cameras import ORBIT, REFERENCE, draw_regime, orbit_probability, reference_pose, sample_orbit_pose
from .config import RunConfig
from .dataio import Checkpoint, ReferenceBundle, save_checkpoint, state_dict_to_numpy, numpy_to_state_dict
from .diffusion import anneal_t_hi, distillation_loss, foreground_weight
from .fields import BackgroundField, RadianceField
from .imageops import resize_chw
from .rendering import Intrinsics, render_view

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    field: RadianceField
    background: BackgroundField
    checkpoint: Checkpoint
    trace: list[dict] = dc_field(default_factory=list)
    skipped_steps: int = 0


def build_scene(cfg: RunConfig) -> tuple[RadianceField, BackgroundField]:
    g = torch.Generator().manual_seed(cfg.seed * 1003)
    field = RadianceField(cfg.field.to_field_config(), generator=g)
    bg = BackgroundField(cfg.field.bg_hidden_dim, generator=g)
    return field, bg


def scene_from_checkpoint(ckpt: Checkpoint) -> tuple[RadianceField, BackgroundField, RunConfig]:
    from .config import config_from_dict

    cfg = config_from_dict(ckpt.config)
    field, bg = build_scene(cfg)
    field.load_state_dict(numpy_to_state_dict(ckpt.field_state))
    bg.load_state_dict(numpy_to_state_dict(ckpt.background_state))
    return field, bg, cfg


def make_checkpoint(
    field: RadianceField,
    bg: BackgroundField,
    cfg: RunConfig,
    step: int,
    embeddings: dict | None = None,
    prior_path: str | None = None,
    adapted_state: dict | None = None,
) -> Checkpoint:
    return Checkpoint(
        step=step,
        field_state=state_dict_to_numpy(field.state_dict()),
        background_state=state_dict_to_numpy(bg.state_dict()),
        embeddings=state_dict_to_numpy(embeddings or {}),
        config=cfg.to_dict(),
        prior_path=prior_path,
        adapted_denoiser_state=state_dict_to_numpy(adapted_state) if adapted_state else None,
    )


def learning_rate(step: int, cfg: RunConfig) -> float:
    """Multiplicative decay reaching lr * lr_final_scale at the last step."""
    total = max(cfg.train.total_steps, 1)
    return cfg.train.lr * cfg.train.lr_final_scale ** (min(step, total) / total)


def _resize_bundle(bundle: ReferenceBundle, res: int):
    rgb = resize_chw(bundle.rgb.permute(2, 0, 1), res).permute(1, 2, 0)
    mask = resize_chw(bundle.mask[None].float(), res)[0] > 0.5
    depth = resize_chw(bundle.pseudo_depth[None], res)[0]
    return rgb, mask, depth


def train_lift(
    bundle: ReferenceBundle,
    cfg: RunConfig,
    denoiser=None,
    encoder=None,
    sampler: GuidanceSampler | None = None,
    y_embed: torch.Tensor | None = None,
    embeddings: dict | None = None,
    out_dir=None,
    prior_path: str | None = None,
) -> TrainResult:
    """Optimize the scene against one reference bundle.

    ``denoiser``/``encoder``/``sampler``/``y_embed`` carry the (possibly
    adapted) prior; with the orbit probability at zero they may all be
    None and training is reference-supervised only. Identical config and
    seed reproduce the loss trace exactly in single-thread mode.
    """
    prev_threads = torch.get_num_threads()
    if cfg.train.single_thread:
        torch.set_num_threads(1)
    try:
        return _train_lift(bundle, cfg, denoiser, encoder, sampler, y_embed,
                           embeddings, out_dir, prior_path)
    finally:
        torch.set_num_threads(prev_threads)


def _train_lift(bundle, cfg, denoiser, encoder, sampler, y_embed, embeddings, out_dir, prior_path):
    cam_sched = cfg.camera.to_schedule_config()
    needs_prior = cfg.camera.lambda_start > 0 or cfg.camera.lambda_end > 0
    if needs_prior and (denoiser is None or sampler is None):
        raise ValueError("orbit regime enabled but no prior denoiser/sampler provided")

    field, bg = build_scene(cfg)
    if denoiser is not None:
        denoiser.requires_grad_(False)
    if encoder is not None:
        for module in (getattr(encoder, "image", None), getattr(encoder, "text", None)):
            if module is not None:
                module.requires_grad_(False)

    base = cfg.seed * 1003
    g_regime = torch.Generator().manual_seed(base + 1)
    g_camera = torch.Generator().manual_seed(base + 2)
    g_jitter = torch.Generator().manual_seed(base + 3)
    g_diffusion = torch.Generator().manual_seed(base + 4)
    g_shading = torch.Generator().manual_seed(base + 5)
    g_pairs = torch.Generator().manual_seed(base + 6)
    g_guidance = torch.Generator().manual_seed(base + 7)

    res = cfg.renderer.train_resolution
    target_rgb, target_mask, target_depth = _resize_bundle(bundle, res)
    pose_cfg = cfg.camera.to_pose_config()
    ref_pose, ref_intr = reference_pose(pose_cfg, width=res, height=res)
    sched = cfg.diffusion.to_schedule()
    gcfg = cfg.diffusion.to_guidance_config()
    weights = cfg.weights.to_loss_weights()
    opt = torch.optim.Adam(
        list(field.parameters()) + list(bg.parameters()),
        lr=cfg.train.lr,
        betas=cfg.train.betas,
    )

    trace: list[dict] = []
    skipped = 0
    total_steps = cfg.train.total_steps
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(total_steps):
        lr = learning_rate(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        regime = draw_regime(step, cam_sched, g_regime)
        entry = {
            "step": step,
            "regime": regime,
            "lambda": orbit_probability(step, cam_sched),
            "t_hi": anneal_t_hi(step, total_steps, gcfg),
            "lr": lr,
            "shading": "none",
        }

        if regime == REFERENCE:
            components = _reference_components(
                field, bg, bundle, cfg, ref_pose, ref_intr,
                target_rgb, target_mask, target_depth, g_jitter, g_pairs,
            )
        else:
            components, shading_mode, finite = _orbit_components(
                field, bg, cfg, pose_cfg, res, step, sched, gcfg, weights,
                denoiser, encoder, sampler, y_embed,
                g_camera, g_jitter, g_shading, g_diffusion, g_guidance, entry,
            )
            entry["shading"] = shading_mode
            if not finite:
                skipped += 1
                entry["skipped"] = True
                trace.append(entry)
                _check_skip_budget(skipped, step, cfg)
                continue

        total = losses.total_loss(components, weights, regime)
        if not torch.isfinite(total):
            skipped += 1
            entry["skipped"] = True
            trace.append(entry)
            _check_skip_budget(skipped, step, cfg)
            continue

        opt.zero_grad()
        total.backward()
        opt.step()

        for name, value in components.items():
            entry[name] = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if "diff_value" in entry:
            entry["diff"] = entry.pop("diff_value")
        entry["total"] = float(total.detach())
        trace.append(entry)

        if out_dir is not None and (step + 1) % cfg.train.checkpoint_every == 0:
            ckpt = make_checkpoint(field, bg, cfg, step + 1, embeddings, prior_path)
            save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.pkl", ckpt)

    final = make_checkpoint(field, bg, cfg, total_steps, embeddings, prior_path)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.pkl", final)
        with open(out_dir / "trace.jsonl", "w") as f:
            for entry in trace:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    return TrainResult(field=field, background=bg, checkpoint=final, trace=trace,
                       skipped_steps=skipped)


def _check_skip_budget(skipped: int, step: int, cfg: RunConfig) -> None:
    done = step + 1
    if done >= 100 and skipped / done > cfg.train.skip_budget:
        raise RuntimeError(
            f"non-finite losses on {skipped}/{done} steps exceeds the "
            f"{cfg.train.skip_budget:.0%} skip budget"
        )


def _reference_components(field, bg, bundle, cfg, pose, intr, target_rgb, target_mask,
                          target_depth, g_jitter, g_pairs):
    out = render_view(
        field, bg, pose, intr,
        cfg.renderer.to_shading_config("none"),
        samples_per_ray=cfg.renderer.samples_per_ray,
        generator=g_jitter,
        near_clip=cfg.renderer.near_clip,
    )
    if bundle.background_valid:
        photo = losses.photometric(out.rgb, target_rgb)
    else:
        bg_only = bg(out.samples.directions).reshape(out.rgb.shape).detach()
        photo = losses.photometric(out.rgb, target_rgb, target_mask, bg_only)

    components = {
        "photometric": photo,
        "smoothness": losses.smoothness_loss(out.depth, target_rgb),
    }

    alpha_ok = out.alpha.detach() > cfg.ranking.alpha_threshold
    if cfg.ranking.depth_mode == "l1":
        components["l1_depth"] = losses.l1_depth_loss(
            out.depth, target_depth, target_mask & alpha_ok
        )
    else:
        pairs = losses.sample_ranking_pairs(
            target_depth, target_mask, cfg.ranking.pair_count,
            cfg.ranking.tie_tol, g_pairs,
        )
        keep = alpha_ok.reshape(-1)[pairs.first] & alpha_ok.reshape(-1)[pairs.second]
        pairs = losses.RankingPairs(pairs.first[keep], pairs.second[keep], pairs.relation[keep])
        components["ranking"] = losses.ranking_loss(out.depth, pairs)
    return components


def _orbit_components(field, bg, cfg, pose_cfg, res, step, sched, gcfg, weights,
                      denoiser, encoder, sampler, y_embed,
                      g_camera, g_jitter, g_shading, g_diffusion, g_guidance, entry):
    pose, intr = sample_orbit_pose(pose_cfg, g_camera, width=res, height=res)
    shading_mode = "none"
    if step >= cfg.train.shading_start_step:
        if torch.rand(1, generator=g_shading).item() < cfg.train.shading_probability:
            shading_mode = "diffuse"
    want_normals = weights.orient > 0

    out = render_view(
        field, bg, pose, intr,
        cfg.renderer.to_shading_config(shading_mode),
        samples_per_ray=cfg.renderer.samples_per_ray,
        generator=g_jitter,
        near_clip=cfg.renderer.near_clip,
        normal_step=cfg.renderer.normal_step,
        normal_weight_cutoff=cfg.renderer.normal_weight_cutoff,
        with_normals=want_normals,
    )

    draw = sampler.draw(g_guidance)
    t_hi = anneal_t_hi(step, cfg.train.total_steps, gcfg)
    alpha_native = resize_chw(out.alpha[None], denoiser.native_resolution)[0]
    w_map = foreground_weight(alpha_native.detach(), cfg.diffusion.foreground_threshold)
    dres = distillation_loss(
        out.rgb, y_embed, draw.z_cond, draw.z_neg, denoiser, encoder,
        sched, gcfg, w_map, g_diffusion, t_hi,
    )
    if not dres.finite:
        return {}, shading_mode, False

    s = out.samples
    if want_normals:
        orient = losses.orient_loss(s.weights, s.normals, s.normals_valid, s.directions)
    else:
        orient = torch.zeros(())
    components = {
        "diff": dres.surrogate,
        "orient": orient,
        "distortion": losses.distortion_loss(s.weights, s.endpoints),
        "sparsity": losses.sparsity_loss(out.alpha),
    }
    entry["diff_value"] = dres.value
    entry["t"] = dres.t
    entry["guidance_mode"] = draw.mode
    return components, shading_mode, True
