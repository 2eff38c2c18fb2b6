"""Differentiable volume rendering: rays, compositing, shading, full views.

Per ray, the span inside the scene bounding box is split into equal
intervals; densities and albedos are queried at one stratified point per
interval and composited with the interval widths as quadrature steps.
Background color comes from a direction-only field and fills the residual
transmittance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor

from .fields import Aabb, compute_normal


@dataclass
class CameraPose:
    """World-from-camera rotation and camera position.

    Convention: camera x right, y up, looking along -z in its own frame.
    """

    rotation: Tensor  # (3, 3)
    position: Tensor  # (3,)

    def __post_init__(self):
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.float32)
        self.position = torch.as_tensor(self.position, dtype=torch.float32)
        if self.rotation.shape != (3, 3) or self.position.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector position")
        eye = torch.eye(3)
        if (self.rotation.T @ self.rotation - eye).abs().max() > 1e-5:
            raise ValueError("rotation is not orthonormal")
        if torch.det(self.rotation) < 0:
            raise ValueError("rotation must be proper (det +1)")

    def forward_axis(self) -> Tensor:
        """Unit viewing direction (world frame)."""
        return -self.rotation[:, 2]


@dataclass
class Intrinsics:
    fov_degrees: float = 60.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not 0 < self.fov_degrees < 180:
            raise ValueError("fov must be in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_degrees) / 2)


@dataclass
class ShadingConfig:
    mode: str = "none"  # "none" | "diffuse"
    ambient: tuple[float, float, float] = (0.1, 0.1, 0.1)
    light_color: tuple[float, float, float] = (0.9, 0.9, 0.9)
    light_noise_std: float = 1.0

    def __post_init__(self):
        if self.mode not in ("none", "diffuse"):
            raise ValueError(f"unknown shading mode {self.mode!r}")
        if any(v < 0 for v in self.ambient + self.light_color):
            raise ValueError("light colors must be nonnegative")


@dataclass
class RaySamples:
    """Per-ray sample records kept for the losses.

    All tensors are flattened over rays: endpoints (R, N+1), weights /
    sigmas / midpoints (R, N), directions (R, 3). ``hit`` marks rays whose
    span intersects the bounding box.
    """

    endpoints: Tensor
    weights: Tensor
    sigmas: Tensor
    midpoints: Tensor
    directions: Tensor
    hit: Tensor
    normals: Optional[Tensor] = None  # (R, N, 3)
    normals_valid: Optional[Tensor] = None  # (R, N) bool


@dataclass
class RenderOutput:
    rgb: Tensor  # (H, W, 3)
    depth: Tensor  # (H, W)
    alpha: Tensor  # (H, W)
    samples: RaySamples
    normal: Optional[Tensor] = None


def generate_rays(pose: CameraPose, intr: Intrinsics, dtype=torch.float32) -> tuple[Tensor, Tensor]:
    """Pinhole rays through pixel centers.

    Returns (origins (H, W, 3), unit directions (H, W, 3)).
    """
    R = pose.rotation.to(dtype)
    j = torch.arange(intr.height, dtype=dtype)
    i = torch.arange(intr.width, dtype=dtype)
    jj, ii = torch.meshgrid(j, i, indexing="ij")
    f = intr.focal
    dirs_cam = torch.stack(
        [
            (ii + 0.5 - intr.width / 2) / f,
            -(jj + 0.5 - intr.height / 2) / f,
            -torch.ones_like(ii),
        ],
        dim=-1,
    )
    dirs = dirs_cam @ R.T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = pose.position.to(dtype).expand_as(dirs)
    return origins, dirs


def ray_box_span(
    origins: Tensor, dirs: Tensor, box: Aabb, near_clip: float = 0.05
) -> tuple[Tensor, Tensor, Tensor]:
    """Slab intersection of rays with the bounding box.

    Returns (t_near (R,), t_far (R,), hit (R,) bool). Missed rays keep a
    degenerate span and must be masked out by the caller.
    """
    lo, hi = box.tensors(origins.dtype, origins.device)
    safe_d = torch.where(dirs.abs() < 1e-9, torch.full_like(dirs, 1e-9), dirs)
    t0 = (lo - origins) / safe_d
    t1 = (hi - origins) / safe_d
    tmin = torch.minimum(t0, t1).amax(dim=-1)
    tmax = torch.maximum(t0, t1).amin(dim=-1)
    t_near = torch.clamp(tmin, min=near_clip)
    hit = tmax > t_near
    # Missed rays keep a unit placeholder span; their densities are masked
    # to zero by the caller, so only monotonicity of the endpoints matters.
    t_far = torch.where(hit, tmax, t_near + 1.0)
    return t_near, t_far, hit


def composite(sigmas: Tensor, colors: Tensor, endpoints: Tensor):
    """Quadrature of the volume rendering integral over one or more rays.

    Args:
        sigmas: (..., N) nonnegative densities, one per interval.
        colors: (..., N, 3) sample colors.
        endpoints: (..., N+1) strictly increasing interval endpoints.

    Returns (rgb (..., 3), depth (...,), alpha (...,), weights (..., N),
    midpoints (..., N)). Depth is the alpha-normalized expected interval
    midpoint.
    """
    if not (endpoints[..., 1:] > endpoints[..., :-1]).all():
        raise ValueError("sample endpoints must be strictly increasing")
    if (sigmas < 0).any():
        raise ValueError("densities must be nonnegative")
    delta = endpoints[..., 1:] - endpoints[..., :-1]
    a = 1.0 - torch.exp(-sigmas * delta)
    trans = torch.cumprod(1.0 - a + 1e-10, dim=-1)
    trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    weights = trans * a
    midpoints = 0.5 * (endpoints[..., 1:] + endpoints[..., :-1])
    rgb = (weights[..., None] * colors).sum(dim=-2)
    alpha = weights.sum(dim=-1)
    depth = (weights * midpoints).sum(dim=-1) / (alpha + 1e-8)
    return rgb, depth, alpha, weights, midpoints


def apply_shading(
    albedo: Tensor,
    normal: Tensor,
    point: Tensor,
    light_pos: Tensor,
    cfg: ShadingConfig,
) -> Tensor:
    """Diffuse point-light shading: albedo * (light * lambert + ambient).

    Samples where the light coincides with the point fall back to raw
    albedo.
    """
    ambient = torch.as_tensor(cfg.ambient, dtype=albedo.dtype, device=albedo.device)
    light_color = torch.as_tensor(cfg.light_color, dtype=albedo.dtype, device=albedo.device)
    to_light = light_pos - point
    dist = to_light.norm(dim=-1, keepdim=True)
    degenerate = dist[..., 0] < 1e-9
    lambert = (normal * to_light / torch.clamp(dist, min=1e-9)).sum(-1).clamp(min=0)
    shaded = albedo * (light_color * lambert[..., None] + ambient)
    return torch.where(degenerate[..., None], albedo, shaded)


def render_view(
    fg,
    bg,
    pose: CameraPose,
    intr: Intrinsics,
    shading: ShadingConfig | None = None,
    samples_per_ray: int = 128,
    generator: torch.Generator | None = None,
    near_clip: float = 0.05,
    normal_mode: str = "finite_difference",
    normal_step: float = 1e-3,
    normal_weight_cutoff: float = 1e-3,
    with_normals: bool = False,
    dtype=torch.float32,
) -> RenderOutput:
    """Render RGB/depth/alpha (and optionally per-sample normals) for a view.

    ``fg`` is any object exposing ``query(points) -> (sigma, albedo)``,
    ``density(points)`` and ``bounding_box``; ``bg`` maps unit directions
    to RGB (or is None for a black background). One stratified jitter per
    interval is drawn from ``generator``; with no generator, samples sit at
    interval midpoints, which keeps renders deterministic.

    Normals are computed by finite differences only for samples whose
    compositing weight exceeds ``normal_weight_cutoff``; the rest are
    flagged invalid (they are skipped by shading and the orientation loss).
    """
    shading = shading or ShadingConfig()
    origins, dirs = generate_rays(pose, intr, dtype=dtype)
    H, W = intr.height, intr.width
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    t_near, t_far, hit = ray_box_span(o, d, fg.bounding_box, near_clip)

    n = samples_per_ray
    fractions = torch.linspace(0, 1, n + 1, dtype=dtype, device=o.device)
    endpoints = t_near[:, None] + (t_far - t_near)[:, None] * fractions[None, :]
    delta = endpoints[:, 1:] - endpoints[:, :-1]
    if generator is not None:
        u = torch.rand(o.shape[0], n, generator=generator, dtype=dtype)
    else:
        u = torch.full((o.shape[0], n), 0.5, dtype=dtype)
    t_sample = endpoints[:, :-1] + u * delta

    points = o[:, None, :] + t_sample[..., None] * d[:, None, :]
    sigma, albedo = fg.query(points.reshape(-1, 3))
    sigma = sigma.reshape(-1, n) * hit[:, None]
    albedo = albedo.reshape(-1, n, 3)

    # Weights depend on density only, so they can gate the normal queries.
    _, _, _, weights, midpoints = composite(sigma, albedo, endpoints)

    normals = None
    normals_valid = None
    need_normals = with_normals or shading.mode == "diffuse"
    if need_normals:
        normals = torch.zeros_like(albedo)
        normals_valid = torch.zeros(sigma.shape, dtype=torch.bool, device=sigma.device)
        important = weights.detach() > normal_weight_cutoff
        if important.any():
            sel_points = points[important]
            sel_norm, sel_valid = compute_normal(
                fg, sel_points, mode=normal_mode, h=normal_step
            )
            normals[important] = sel_norm
            normals_valid[important] = sel_valid

    if shading.mode == "diffuse":
        if generator is not None:
            noise = torch.randn(3, generator=generator, dtype=dtype)
        else:
            noise = torch.zeros(3, dtype=dtype)
        light_pos = pose.position.to(dtype) + shading.light_noise_std * noise
        shaded = apply_shading(albedo, normals, points, light_pos, shading)
        colors = torch.where(normals_valid[..., None], shaded, albedo)
    else:
        colors = albedo

    rgb_fg = (weights[..., None] * colors).sum(dim=-2)
    alpha = weights.sum(dim=-1)
    depth = (weights * midpoints).sum(dim=-1) / (alpha + 1e-8)
    if bg is not None:
        bg_rgb = bg(d)
    else:
        bg_rgb = torch.zeros_like(rgb_fg)
    rgb = rgb_fg + (1.0 - alpha[..., None]) * bg_rgb

    samples = RaySamples(
        endpoints=endpoints,
        weights=weights,
        sigmas=sigma,
        midpoints=midpoints,
        directions=d,
        hit=hit,
        normals=normals,
        normals_valid=normals_valid,
    )
    return RenderOutput(
        rgb=rgb.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        alpha=alpha.reshape(H, W),
        samples=samples,
    )


def render_normal_map(
    fg,
    pose: CameraPose,
    intr: Intrinsics,
    resolution: int = 100,
    samples_per_ray: int = 64,
    normal_step: float = 1e-3,
    normal_weight_cutoff: float = 1e-3,
) -> tuple[Tensor, Tensor]:
    """Low-resolution map of expected surface normals.

    Per pixel, valid finite-difference sample normals are blended with the
    compositing weights and renormalized. Returns (normal map
    (resolution, resolution, 3), valid mask). Pixels without any valid
    contribution are flagged False and left zero.
    """
    small = Intrinsics(intr.fov_degrees, resolution, resolution)
    out = render_view(
        fg,
        None,
        pose,
        small,
        ShadingConfig(mode="none"),
        samples_per_ray=samples_per_ray,
        generator=None,
        normal_step=normal_step,
        normal_weight_cutoff=normal_weight_cutoff,
        with_normals=True,
    )
    s = out.samples
    contrib = s.weights[..., None] * s.normals * s.normals_valid[..., None]
    summed = contrib.sum(dim=-2)
    norm = summed.norm(dim=-1, keepdim=True)
    valid = (norm[..., 0] > 1e-6) & s.normals_valid.any(dim=-1)
    normal = torch.where(valid[..., None], summed / torch.clamp(norm, min=1e-12), torch.zeros_like(summed))
    return normal.reshape(resolution, resolution, 3), valid.reshape(resolution, resolution)
