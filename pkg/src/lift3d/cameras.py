"""Training-time camera distribution: fixed reference view vs. random orbit.

Orbit poses sit on a sphere around the object, look at the origin and get
small Gaussian perturbations. A Bernoulli switch with a ramped probability
decides per step whether to supervise the reference view or draw an orbit
view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .rendering import CameraPose, Intrinsics

REFERENCE = "reference"
ORBIT = "orbit"


@dataclass
class PoseDistributionConfig:
    radius_range: tuple[float, float] = (0.4, 1.0)
    fov_range: tuple[float, float] = (50.0, 70.0)
    pose_noise_rot: float = 0.02  # radians
    pose_noise_trans: float = 0.01  # scene units
    reference_radius: float = 0.7
    reference_fov: float = 60.0

    def __post_init__(self):
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ValueError("invalid radius range")
        if not 0 < self.fov_range[0] <= self.fov_range[1] < 180:
            raise ValueError("invalid fov range")


@dataclass
class CameraScheduleConfig:
    lambda_start: float = 0.0
    lambda_end: float = 0.75
    ramp_steps: int = 2000

    def __post_init__(self):
        if not (0 <= self.lambda_start <= 1 and 0 <= self.lambda_end <= 1):
            raise ValueError("lambda bounds must be probabilities")
        if self.ramp_steps < 1:
            raise ValueError("ramp_steps must be >= 1")


def look_at_pose(position: Tensor, target: Tensor | None = None) -> CameraPose:
    """Build a pose at ``position`` looking toward ``target`` (origin by default).

    Up is +y, with a deterministic +x fallback when the view direction is
    (anti)parallel to it.
    """
    position = torch.as_tensor(position, dtype=torch.float32)
    target = torch.zeros(3) if target is None else torch.as_tensor(target, dtype=torch.float32)
    forward = target - position
    forward = forward / forward.norm()
    up = torch.tensor([0.0, 1.0, 0.0])
    if forward[1].abs() > 0.999:
        up = torch.tensor([1.0, 0.0, 0.0])
    z_cam = -forward
    x_cam = torch.linalg.cross(up, z_cam)
    x_cam = x_cam / x_cam.norm()
    y_cam = torch.linalg.cross(z_cam, x_cam)
    rotation = torch.stack([x_cam, y_cam, z_cam], dim=-1)
    return CameraPose(rotation=rotation, position=position)


def _orthonormalize(m: Tensor) -> Tensor:
    """Project a near-rotation onto SO(3) via its polar factor."""
    u, _, vt = torch.linalg.svd(m)
    r = u @ vt
    if torch.det(r) < 0:
        u = u.clone()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def _rodrigues(axis_angle: Tensor) -> Tensor:
    theta = axis_angle.norm()
    if theta < 1e-12:
        return torch.eye(3)
    k = axis_angle / theta
    kx = torch.tensor(
        [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]]
    )
    return torch.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


def uniform_sphere_direction(generator: torch.Generator | None = None) -> Tensor:
    """Uniform draw from the unit sphere."""
    u = torch.rand(2, generator=generator)
    z = 2.0 * u[0] - 1.0
    phi = 2.0 * math.pi * u[1]
    s = torch.sqrt(torch.clamp(1 - z * z, min=0.0))
    return torch.tensor([s * math.cos(phi), s * math.sin(phi), z])


def sample_orbit_pose(
    cfg: PoseDistributionConfig,
    generator: torch.Generator | None = None,
    width: int = 128,
    height: int = 128,
) -> tuple[CameraPose, Intrinsics]:
    """Random look-at-origin camera on a spherical shell plus pose noise."""
    direction = uniform_sphere_direction(generator)
    u = torch.rand(2, generator=generator)
    radius = cfg.radius_range[0] + (cfg.radius_range[1] - cfg.radius_range[0]) * u[0]
    fov = cfg.fov_range[0] + (cfg.fov_range[1] - cfg.fov_range[0]) * u[1]
    pose = look_at_pose(direction * radius)

    noise_rot = torch.randn(3, generator=generator) * cfg.pose_noise_rot
    noise_trans = torch.randn(3, generator=generator) * cfg.pose_noise_trans
    rotation = _orthonormalize(_rodrigues(noise_rot) @ pose.rotation)
    position = pose.position + noise_trans
    return CameraPose(rotation=rotation, position=position), Intrinsics(float(fov), width, height)


def reference_pose(
    cfg: PoseDistributionConfig, width: int = 128, height: int = 128
) -> tuple[CameraPose, Intrinsics]:
    """The fixed reference camera: on +z at the reference radius, no noise."""
    pose = look_at_pose(torch.tensor([0.0, 0.0, cfg.reference_radius]))
    return pose, Intrinsics(cfg.reference_fov, width, height)


def orbit_probability(step: int, cfg: CameraScheduleConfig) -> float:
    """Ramped probability of drawing an orbit view at this step."""
    frac = min(1.0, step / cfg.ramp_steps)
    return cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * frac


def draw_regime(step: int, cfg: CameraScheduleConfig, generator: torch.Generator | None = None) -> str:
    """Bernoulli switch between the reference view and a random orbit view."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    lam = orbit_probability(step, cfg)
    if lam <= 0.0:
        return REFERENCE
    if lam >= 1.0:
        return ORBIT
    return ORBIT if torch.rand(1, generator=generator).item() < lam else REFERENCE
