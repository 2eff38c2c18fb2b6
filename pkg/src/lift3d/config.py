"""Run configuration: one nested structure holding every tunable constant.

Configs load from YAML; unknown keys anywhere in the tree are faults, so a
typo cannot silently fall back to a default. Sections convert to the
module-level config objects they mirror.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field
from typing import get_args, get_origin, get_type_hints

import yaml

from .adaptation import FinetuneConfig
from .cameras import CameraScheduleConfig, PoseDistributionConfig
from .diffusion import GuidanceConfig, NoiseSchedule
from .fields import Aabb, FieldConfig, HashGridConfig
from .losses import LossWeights
from .rendering import ShadingConfig


@dataclass
class FieldSection:
    levels: int = 16
    base_resolution: int = 16
    finest_resolution: int = 2048
    features_per_entry: int = 2
    table_size_log2: int = 19
    box_half_extent: float = 1.0
    hidden_dim: int = 64
    density_scale: float = 25.0
    density_bias: float = -4.0
    bg_hidden_dim: int = 32

    def to_field_config(self) -> FieldConfig:
        half = self.box_half_extent
        grid = HashGridConfig(
            levels=self.levels,
            base_resolution=self.base_resolution,
            finest_resolution=self.finest_resolution,
            features_per_entry=self.features_per_entry,
            table_size_log2=self.table_size_log2,
            bounding_box=Aabb(lo=(-half,) * 3, hi=(half,) * 3),
        )
        return FieldConfig(
            grid=grid,
            hidden_dim=self.hidden_dim,
            density_scale=self.density_scale,
            density_bias=self.density_bias,
        )


@dataclass
class RendererSection:
    train_resolution: int = 128
    samples_per_ray: int = 128
    near_clip: float = 0.05
    normal_map_resolution: int = 100
    normal_step: float = 1e-3
    normal_weight_cutoff: float = 1e-3
    ambient: tuple[float, float, float] = (0.1, 0.1, 0.1)
    light_color: tuple[float, float, float] = (0.9, 0.9, 0.9)
    light_noise_std: float = 1.0

    def to_shading_config(self, mode: str) -> ShadingConfig:
        return ShadingConfig(
            mode=mode,
            ambient=self.ambient,
            light_color=self.light_color,
            light_noise_std=self.light_noise_std,
        )


@dataclass
class CameraSection:
    radius_range: tuple[float, float] = (0.4, 1.0)
    fov_range: tuple[float, float] = (50.0, 70.0)
    pose_noise_rot: float = 0.02
    pose_noise_trans: float = 0.01
    reference_radius: float = 0.7
    reference_fov: float = 60.0
    lambda_start: float = 0.0
    lambda_end: float = 0.75
    ramp_steps: int = 2000

    def to_pose_config(self) -> PoseDistributionConfig:
        return PoseDistributionConfig(
            radius_range=self.radius_range,
            fov_range=self.fov_range,
            pose_noise_rot=self.pose_noise_rot,
            pose_noise_trans=self.pose_noise_trans,
            reference_radius=self.reference_radius,
            reference_fov=self.reference_fov,
        )

    def to_schedule_config(self) -> CameraScheduleConfig:
        return CameraScheduleConfig(
            lambda_start=self.lambda_start,
            lambda_end=self.lambda_end,
            ramp_steps=self.ramp_steps,
        )


@dataclass
class DiffusionSection:
    steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    guidance_weight: float = 100.0
    clip_scale: float = 10.0
    t_lo: int = 50
    t_hi: int = 950
    t_hi_final: int = 300
    grad_mode: str = "score_distillation"
    foreground_threshold: float = 0.1

    def to_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.steps, self.beta_start, self.beta_end)

    def to_guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(
            guidance_weight=self.guidance_weight,
            clip_scale=self.clip_scale,
            t_lo=self.t_lo,
            t_hi=self.t_hi,
            t_hi_final=self.t_hi_final,
            grad_mode=self.grad_mode,
        )


@dataclass
class WeightsSection:
    photometric: float = 1.0
    ranking: float = 1.0
    orient: float = 10.0
    distortion: float = 5e-2
    sparsity: float = 1e-3
    smoothness: float = 0.1
    diff: float = 1.0

    def to_loss_weights(self) -> LossWeights:
        return LossWeights(**dataclasses.asdict(self))


@dataclass
class RankingSection:
    pair_count: int = 4096
    tie_tol: float = 1e-3
    alpha_threshold: float = 0.5
    depth_mode: str = "ranking"  # "ranking" | "l1"

    def __post_init__(self):
        if self.depth_mode not in ("ranking", "l1"):
            raise ValueError(f"unknown depth mode {self.depth_mode!r}")


@dataclass
class TrainSection:
    total_steps: int = 10_000
    lr: float = 1e-3
    lr_final_scale: float = 0.1
    betas: tuple[float, float] = (0.9, 0.99)
    shading_start_step: int = 1000
    shading_probability: float = 0.5
    checkpoint_every: int = 1000
    skip_budget: float = 0.01
    single_thread: bool = True

    def __post_init__(self):
        if self.total_steps < 0 or self.checkpoint_every < 1:
            raise ValueError("step counts must be positive")
        if not 0.0 <= self.shading_probability <= 1.0:
            raise ValueError("shading probability must be in [0, 1]")


@dataclass
class AdaptationSection:
    enabled: bool = True
    eta: float = 0.7
    stage1_steps: int = 500
    stage2_steps: int = 1000
    lr_stage1: float = 1e-3
    lr_stage2: float = 3e-3
    sim_weight: float = 0.25
    alternation_fraction: float = 0.5
    aug_shift_frac: float = 0.1
    aug_scale: tuple[float, float] = (0.9, 1.1)
    aug_rotate_deg: float = 15.0

    def to_finetune_config(self, t_lo: int = 50, t_hi: int = 950) -> FinetuneConfig:
        return FinetuneConfig(
            eta=self.eta,
            stage1_steps=self.stage1_steps,
            stage2_steps=self.stage2_steps,
            lr_stage1=self.lr_stage1,
            lr_stage2=self.lr_stage2,
            sim_weight=self.sim_weight,
            alternation_fraction=self.alternation_fraction,
            aug_shift_frac=self.aug_shift_frac,
            aug_scale=self.aug_scale,
            aug_rotate_deg=self.aug_rotate_deg,
            t_lo=t_lo,
            t_hi=t_hi,
        )


@dataclass
class PriorSection:
    checkpoint_path: str | None = None
    embed_dim: int = 64
    native_resolution: int = 32
    channels: int = 32


@dataclass
class EvaluationSection:
    n_views: int = 100
    orbit_radius: float = 1.25
    elevation_deg: float = 15.0
    resolution: int = 128


@dataclass
class RunConfig:
    seed: int = 0
    field: FieldSection = dc_field(default_factory=FieldSection)
    renderer: RendererSection = dc_field(default_factory=RendererSection)
    camera: CameraSection = dc_field(default_factory=CameraSection)
    diffusion: DiffusionSection = dc_field(default_factory=DiffusionSection)
    weights: WeightsSection = dc_field(default_factory=WeightsSection)
    ranking: RankingSection = dc_field(default_factory=RankingSection)
    train: TrainSection = dc_field(default_factory=TrainSection)
    adaptation: AdaptationSection = dc_field(default_factory=AdaptationSection)
    prior: PriorSection = dc_field(default_factory=PriorSection)
    evaluation: EvaluationSection = dc_field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value, target_type, path: str):
    origin = get_origin(target_type)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"config key {path}: expected a sequence, got {value!r}")
        args = get_args(target_type)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], path) for v in value)
        if len(value) != len(args):
            raise ValueError(f"config key {path}: expected {len(args)} entries")
        return tuple(_coerce(v, t, path) for v, t in zip(value, args))
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    allowed = {int: int, float: float, str: str, bool: bool}.get(target_type)
    if allowed is not None and not isinstance(value, allowed):
        # Optional[str] arrives as str | None; handle unions below.
        pass
    return value


def _build_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or 'root'} must be a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown config key(s) {unknown} in section {path or 'root'}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        key_path = f"{path}.{f.name}" if path else f.name
        hint = hints[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build_section(hint, value, key_path)
        else:
            kwargs[f.name] = _coerce(value, hint, key_path)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build_section(RunConfig, data or {}, "")


def load_config(path) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    try:
        return config_from_dict(data or {})
    except (ValueError, TypeError) as err:
        raise ValueError(f"{path}: {err}") from err


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
