"""Diffusion-time machinery behind the prior distillation loss.

Holds the noise schedule, single-step perturbation and clean-image
recovery, the guided noise prediction (classifier-free combination plus an
embedding-similarity gradient), foreground weighting, timestep annealing,
and the distillation loss that feeds rendered views to a frozen denoiser.

Only single-step operations are needed here; there is no iterative
sampling loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .imageops import resize_chw, to_signed, to_unit

log = logging.getLogger(__name__)


class NoiseSchedule:
    """Scaled-linear beta schedule and its derived per-step constants.

    Timesteps are 1-based: ``beta(1) == beta_start`` and
    ``beta(T) == beta_end``. ``alpha(t)`` and ``sigma(t)`` are the marginal
    coefficients of the forward process (alpha^2 + sigma^2 = 1); both are
    kept in float64 so the thousandfold cumulative product stays exact to
    ~1e-15.
    """

    def __init__(self, steps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        if not 0 < beta_start < beta_end < 1:
            raise ValueError(f"need 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]")
        if steps < 2:
            raise ValueError("schedule needs at least 2 steps")
        self.steps = steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        sqrt_beta = torch.linspace(
            math.sqrt(beta_start), math.sqrt(beta_end), steps, dtype=torch.float64
        )
        self.betas = sqrt_beta**2
        self.alpha_bars = torch.cumprod(1.0 - self.betas, dim=0)
        self.alphas = torch.sqrt(self.alpha_bars)
        self.sigmas = torch.sqrt(1.0 - self.alpha_bars)
        self.loss_weights = torch.ones(steps, dtype=torch.float64)

    def _index(self, t: int) -> int:
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside [1, {self.steps}]")
        return t - 1

    def beta(self, t: int) -> float:
        return self.betas[self._index(t)].item()

    def alpha_bar(self, t: int) -> float:
        return self.alpha_bars[self._index(t)].item()

    def alpha(self, t: int) -> float:
        return self.alphas[self._index(t)].item()

    def sigma(self, t: int) -> float:
        return self.sigmas[self._index(t)].item()

    def loss_weight(self, t: int) -> float:
        return self.loss_weights[self._index(t)].item()


def make_schedule(steps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> NoiseSchedule:
    return NoiseSchedule(steps, beta_start, beta_end)


def perturb(x0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward-process draw x_t = alpha_t x0 + sigma_t eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    return sched.alpha(t) * x0 + sched.sigma(t) * eps


def predict_x0(x_t: Tensor, eps_hat: Tensor, t: int, sched: NoiseSchedule) -> Tensor:
    """Single-step clean-image estimate (x_t - sigma_t eps_hat) / alpha_t."""
    return (x_t - sched.sigma(t) * eps_hat) / sched.alpha(t)


@dataclass
class GuidanceConfig:
    guidance_weight: float = 100.0
    clip_scale: float = 10.0
    t_lo: int = 50
    t_hi: int = 950
    t_hi_final: int = 300
    grad_mode: str = "score_distillation"  # or "full_backprop"

    def __post_init__(self):
        if self.guidance_weight < 0:
            raise ValueError("guidance weight must be nonnegative")
        if not 1 <= self.t_lo < self.t_hi:
            raise ValueError("need 1 <= t_lo < t_hi")
        if self.grad_mode not in ("score_distillation", "full_backprop"):
            raise ValueError(f"unknown grad mode {self.grad_mode!r}")


def anneal_t_hi(step: int, total_steps: int, cfg: GuidanceConfig) -> int:
    """Linear decay of the upper timestep bound from t_hi to t_hi_final."""
    if total_steps <= 0:
        return cfg.t_hi_final
    frac = min(1.0, step / total_steps)
    return int(round(cfg.t_hi + (cfg.t_hi_final - cfg.t_hi) * frac))


def foreground_weight(alpha_map: Tensor, threshold: float = 0.1) -> Tensor:
    """Spatial loss weight: 2 inside the alpha bounding box, 1 outside.

    The box is the tightest axis-aligned rectangle covering pixels with
    alpha above ``threshold``; an empty box yields an all-ones map.
    """
    weight = torch.ones_like(alpha_map)
    mask = alpha_map > threshold
    if mask.any():
        rows = torch.where(mask.any(dim=1))[0]
        cols = torch.where(mask.any(dim=0))[0]
        weight[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = 2.0
    return weight


class Denoiser(nn.Module):
    """Noise-prediction interface.

    ``forward(x_t, t, z)`` takes a batch (B, 3, H, W) in [-1, 1] territory,
    integer timesteps (B,) and conditioning embeddings (B, d) or None for
    the unconditional branch, and returns a same-shaped noise estimate.
    Implementations declare ``native_resolution`` and ``embed_dim``.
    """

    native_resolution: int
    embed_dim: int

    def predict(self, x_t: Tensor, t: int, z: Optional[Tensor]) -> Tensor:
        """Single-image convenience wrapper around ``forward``."""
        zb = None if z is None else z[None]
        tb = torch.tensor([t], dtype=torch.long, device=x_t.device)
        return self(x_t[None], tb, zb)[0]


def _sinusoidal_embedding(t: Tensor, dim: int, total: int, dtype=torch.float32) -> Tensor:
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=dtype, device=t.device)
        * (-math.log(10_000.0) / max(half - 1, 1))
    )
    ang = t.to(dtype)[:, None] / total * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class _FilmConv(nn.Module):
    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(cond_dim, 2 * channels)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.conv(x)
        gamma, beta = self.film(cond).chunk(2, dim=-1)
        h = h * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]
        return torch.nn.functional.silu(h)


class ToyDenoiser(Denoiser):
    """Small convolutional noise predictor for desk-scale experiments.

    Conditioning is a learned embedding vector added to a sinusoidal
    timestep code; a learned null embedding stands in when ``z`` is None so
    the same network serves both classifier-free branches.
    """

    def __init__(
        self,
        native_resolution: int = 32,
        embed_dim: int = 64,
        channels: int = 32,
        time_steps: int = 1000,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.native_resolution = native_resolution
        self.embed_dim = embed_dim
        self.time_steps = time_steps
        cond = 48
        self.t_proj = nn.Linear(32, cond)
        self.z_proj = nn.Linear(embed_dim, cond)
        self.null_embed = nn.Parameter(torch.zeros(embed_dim))
        self.conv_in = nn.Conv2d(3, channels, 3, padding=1)
        self.block1 = _FilmConv(channels, cond)
        self.block2 = _FilmConv(channels, cond)
        self.block3 = _FilmConv(channels, cond)
        self.conv_out = nn.Conv2d(channels, 3, 3, padding=1)
        if generator is not None:
            self._reseed(generator)

    def _reseed(self, generator: torch.Generator) -> None:
        for p in self.parameters():
            if p.dim() > 1:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.data.uniform_(-bound, bound, generator=generator)
            else:
                p.data.zero_()

    def forward(self, x_t: Tensor, t: Tensor, z: Optional[Tensor]) -> Tensor:
        b = x_t.shape[0]
        if z is None:
            z = self.null_embed[None].expand(b, -1)
        dtype = self.t_proj.weight.dtype
        cond = torch.nn.functional.silu(
            self.t_proj(_sinusoidal_embedding(t, 32, self.time_steps, dtype)) + self.z_proj(z.to(dtype))
        )
        h = torch.nn.functional.silu(self.conv_in(x_t))
        h = self.block1(h, cond)
        h = self.block2(h, cond)
        h = self.block3(h, cond)
        return self.conv_out(h)


def guided_score(
    x_t: Tensor,
    t: int,
    z_cond: Tensor,
    z_neg: Optional[Tensor],
    y_embed: Optional[Tensor],
    denoiser: Denoiser,
    encoder,
    cfg: GuidanceConfig,
    sched: NoiseSchedule,
) -> Tensor:
    """Guided noise prediction for one image (3, H, W).

    Combines the conditional and negative-branch predictions with the
    classifier-free weight, then adds an embedding-similarity term scaled
    by sqrt(1 - alpha_bar_t). ``z_neg=None`` uses the unconditional branch;
    passing the original conditioning embedding instead redirects the
    negative branch at it. A noise prediction moves against the data-space
    score, so ascending similarity means subtracting the similarity
    gradient here. Encoder failures drop the similarity term with a
    warning rather than aborting the step.
    """
    eps_c = denoiser.predict(x_t, t, z_cond)
    w = cfg.guidance_weight
    if w == 0.0:
        eps = eps_c
    else:
        eps_n = denoiser.predict(x_t, t, z_neg)
        eps = (1.0 + w) * eps_c - w * eps_n

    if cfg.clip_scale != 0.0 and encoder is not None and y_embed is not None:
        try:
            with torch.enable_grad():
                x_req = x_t.detach().requires_grad_(True)
                eps_for_x0 = denoiser.predict(x_req, t, z_cond)
                x0 = predict_x0(x_req, eps_for_x0, t, sched).clamp(-1.0, 1.0)
                sim = (encoder.embed_image(to_unit(x0)) * y_embed).sum()
                (grad_sim,) = torch.autograd.grad(sim, x_req)
            scale = cfg.clip_scale * math.sqrt(1.0 - sched.alpha_bar(t))
            eps = eps - scale * grad_sim
        except Exception:
            log.warning("similarity guidance failed; continuing without it", exc_info=True)
    return eps


@dataclass
class DistillationResult:
    value: float
    surrogate: Tensor  # scalar; backward routes the stated pixel gradient
    t: int
    finite: bool


def distillation_loss(
    rendered: Tensor,
    y_embed: Optional[Tensor],
    z_cond: Tensor,
    z_neg: Optional[Tensor],
    denoiser: Denoiser,
    encoder,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    weight_map: Optional[Tensor],
    generator: torch.Generator | None = None,
    t_hi: Optional[int] = None,
) -> DistillationResult:
    """Prior-distillation loss on a rendered view.

    ``rendered`` is (H, W, 3) in [0, 1]; it is resized to the denoiser's
    native resolution and mapped to [-1, 1] before perturbation, and that
    chain is part of the differentiated path. ``weight_map`` is a spatial
    weight at native resolution (see ``foreground_weight``); None means
    uniform.

    In score-distillation mode the denoiser output is treated as a
    constant and the gradient reaching the rendered pixels is
    w(t) * W * (eps_guided - eps), routed back through the resize adjoint.
    Full-backprop mode instead differentiates the squared residual through
    the denoiser. The returned ``value`` is the mean weighted squared
    residual either way; non-finite denoiser output marks the result as
    skippable instead of raising.
    """
    res = denoiser.native_resolution
    x0 = to_signed(resize_chw(rendered.permute(2, 0, 1), res))
    hi = t_hi if t_hi is not None else cfg.t_hi
    t = int(torch.randint(cfg.t_lo, hi + 1, (1,), generator=generator).item())
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    w_t = sched.loss_weight(t)
    weight = torch.ones(res, res, dtype=x0.dtype) if weight_map is None else weight_map

    if cfg.grad_mode == "score_distillation":
        with torch.no_grad():
            x_t = perturb(x0, t, eps, sched)
            eps_hat = guided_score(x_t, t, z_cond, z_neg, y_embed, denoiser, encoder, cfg, sched)
        if not torch.isfinite(eps_hat).all():
            return DistillationResult(float("nan"), x0.sum() * 0.0, t, False)
        grad = w_t * weight[None] * (eps_hat - eps)
        surrogate = (grad.detach() * x0).sum()
        value = (weight[None] * (eps_hat - eps) ** 2).mean().item()
    else:
        x_t = perturb(x0, t, eps, sched)
        eps_hat = guided_score(x_t, t, z_cond, z_neg, y_embed, denoiser, encoder, cfg, sched)
        if not torch.isfinite(eps_hat).all():
            return DistillationResult(float("nan"), x0.sum() * 0.0, t, False)
        surrogate = (w_t * weight[None] * (eps_hat - eps) ** 2).mean()
        value = surrogate.item()
    return DistillationResult(value, surrogate, t, True)


def denoiser_elbo_loss(
    denoiser: Denoiser,
    images: Tensor,
    z: Optional[Tensor],
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    t: Optional[Tensor] = None,
) -> Tensor:
    """Noise-prediction MSE on a batch (B, 3, H, W) in [-1, 1]."""
    b = images.shape[0]
    if t is None:
        t = torch.randint(1, sched.steps + 1, (b,), generator=generator)
    eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    alphas = torch.tensor([sched.alpha(int(s)) for s in t], dtype=images.dtype)
    sigmas = torch.tensor([sched.sigma(int(s)) for s in t], dtype=images.dtype)
    x_t = alphas[:, None, None, None] * images + sigmas[:, None, None, None] * eps
    eps_hat = denoiser(x_t, t, z)
    return ((eps_hat - eps) ** 2).mean()


def train_toy_denoiser(
    denoiser: ToyDenoiser,
    images: Tensor,
    embeddings: Tensor,
    sched: NoiseSchedule,
    steps: int = 800,
    batch_size: int = 16,
    lr: float = 2e-3,
    uncond_prob: float = 0.15,
    generator: torch.Generator | None = None,
) -> list[float]:
    """Fit the toy prior on (N, 3, H, W) images with per-image embeddings.

    A fraction of conditioning vectors is dropped to the learned null
    embedding each batch so the unconditional branch trains alongside the
    conditional one.
    """
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    n = images.shape[0]
    history = []
    for _ in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=generator)
        drop = torch.rand(batch_size, generator=generator) < uncond_prob
        z = torch.where(
            drop[:, None], denoiser.null_embed[None].expand(batch_size, -1), embeddings[idx]
        )
        loss = denoiser_elbo_loss(denoiser, images[idx], z, sched, generator=generator)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history
