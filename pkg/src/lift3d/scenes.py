"""Analytic reference scenes: ray-traced spheres and cubes with exact depth.

These renders stand in for real segmented photos at desk scale. Geometry,
masks and depth are exact, textures are seeded procedural color fields, so
every derived quantity has a closed-form oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .cameras import PoseDistributionConfig, look_at_pose, sample_orbit_pose
from .rendering import CameraPose, Intrinsics, generate_rays

COLORS = {
    "red": (0.85, 0.20, 0.15),
    "green": (0.20, 0.75, 0.25),
    "blue": (0.20, 0.35, 0.85),
    "yellow": (0.90, 0.80, 0.15),
    "purple": (0.60, 0.25, 0.80),
    "cyan": (0.15, 0.75, 0.80),
}
SHAPES = ("sphere", "cube")
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)


@dataclass
class SceneRender:
    rgb: Tensor  # (H, W, 3) in [0, 1], object composited over background
    depth: Tensor  # (H, W), hit distance; background pixels get a far value
    mask: Tensor  # (H, W) bool foreground
    prompt: str


def _sphere_hit(o: Tensor, d: Tensor, radius: float) -> tuple[Tensor, Tensor, Tensor]:
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = torch.sqrt(torch.clamp(disc, min=0.0))
    t = -b - sq
    hit = hit & (t > 0)
    points = o + t[..., None] * d
    normals = points / radius
    return t, hit, normals


def _cube_hit(o: Tensor, d: Tensor, half: float) -> tuple[Tensor, Tensor, Tensor]:
    safe_d = torch.where(d.abs() < 1e-9, torch.full_like(d, 1e-9), d)
    t0 = (-half - o) / safe_d
    t1 = (half - o) / safe_d
    tmin_axes = torch.minimum(t0, t1)
    tmax_axes = torch.maximum(t0, t1)
    tmin, axis = tmin_axes.max(dim=-1)
    tmax = tmax_axes.amin(dim=-1)
    hit = (tmax > tmin) & (tmin > 0)
    normals = torch.zeros_like(d)
    sign = -torch.sign(torch.gather(d, -1, axis[..., None]))[..., 0]
    normals.scatter_(-1, axis[..., None], sign[..., None])
    return tmin, hit, normals


def _texture(points: Tensor, base: Tensor, seed: int) -> Tensor:
    g = torch.Generator().manual_seed(seed)
    freq = 4.0 + 6.0 * torch.rand(3, 3, generator=g)
    phase = 2 * math.pi * torch.rand(3, generator=g)
    wave = torch.sin(points @ freq.T * math.pi + phase)
    return (base * (0.75 + 0.25 * wave)).clamp(0.0, 1.0)


def synth_scene(
    shape: str = "sphere",
    texture_seed: int = 0,
    pose: CameraPose | None = None,
    intr: Intrinsics | None = None,
    color: str = "red",
    size: float = 0.27,
    background: tuple[float, float, float] = DEFAULT_BACKGROUND,
) -> SceneRender:
    """Ray-trace one Lambertian primitive with exact depth and mask.

    The light sits at the camera, so the facing surface is lit; ambient
    fill keeps grazing surfaces visible. Identical arguments produce
    bit-identical outputs.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    if color not in COLORS:
        raise ValueError(f"unknown color {color!r}")
    pose = pose or look_at_pose(torch.tensor([0.0, 0.0, 0.7]))
    intr = intr or Intrinsics(60.0, 64, 64)
    origins, dirs = generate_rays(pose, intr)
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)

    if shape == "sphere":
        t, hit, normals = _sphere_hit(o, d, size)
    else:
        t, hit, normals = _cube_hit(o, d, size * 0.85)

    points = o + t[..., None] * d
    base = torch.tensor(COLORS[color])
    albedo = _texture(points, base, texture_seed)
    to_light = o - points  # headlight at the camera
    to_light = to_light / torch.clamp(to_light.norm(dim=-1, keepdim=True), min=1e-9)
    lambert = (normals * to_light).sum(-1).clamp(min=0.0)
    shaded = albedo * (0.85 * lambert[..., None] + 0.15)

    bg = torch.tensor(background)
    rgb = torch.where(hit[..., None], shaded, bg.expand_as(shaded))
    far = pose.position.norm().item() + 1.0
    depth = torch.where(hit, t, torch.full_like(t, far))

    H, W = intr.height, intr.width
    return SceneRender(
        rgb=rgb.reshape(H, W, 3).clamp(0.0, 1.0),
        depth=depth.reshape(H, W),
        mask=hit.reshape(H, W),
        prompt=f"a {color} {shape}",
    )


@dataclass
class SceneFamily:
    """Labeled renders of the primitive family, split for held-out checks."""

    images: Tensor  # (N, 3, H, W)
    prompts: list[str]
    heldout_images: Tensor
    heldout_prompts: list[str]


def make_scene_family(
    views_per_scene: int = 8,
    resolution: int = 48,
    seed: int = 0,
    colors: tuple[str, ...] = tuple(COLORS),
    shapes: tuple[str, ...] = SHAPES,
) -> SceneFamily:
    """Render every (shape, color) class from random orbit poses.

    One view per scene is held out (the last); the rest are training data
    for the toy prior and encoders.
    """
    g = torch.Generator().manual_seed(seed)
    cfg = PoseDistributionConfig(pose_noise_rot=0.0, pose_noise_trans=0.0)
    train_imgs, train_prompts = [], []
    held_imgs, held_prompts = [], []
    for si, shape in enumerate(shapes):
        for ci, color in enumerate(colors):
            texture_seed = seed * 1000 + si * 100 + ci
            for v in range(views_per_scene):
                pose, _ = sample_orbit_pose(cfg, g, width=resolution, height=resolution)
                intr = Intrinsics(60.0, resolution, resolution)
                scene = synth_scene(shape, texture_seed, pose, intr, color=color)
                img = scene.rgb.permute(2, 0, 1)
                if v == views_per_scene - 1:
                    held_imgs.append(img)
                    held_prompts.append(scene.prompt)
                else:
                    train_imgs.append(img)
                    train_prompts.append(scene.prompt)
    return SceneFamily(
        images=torch.stack(train_imgs),
        prompts=train_prompts,
        heldout_images=torch.stack(held_imgs),
        heldout_prompts=held_prompts,
    )
