"""Scalar training losses: photometric, depth ranking, and the geometry
regularizers (orientation, ray compactness, alpha sparsity, depth
smoothness), plus the weighted per-regime total.

All losses are nonnegative, reduce to exactly zero on their degenerate
inputs, and are plain differentiable tensor functions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    photometric: float = 1.0
    ranking: float = 1.0
    orient: float = 10.0
    distortion: float = 5e-2
    sparsity: float = 1e-3
    smoothness: float = 0.1
    diff: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


# Components a regime must supply to total_loss. The reference view is fit
# directly; orbit views are driven by the prior plus geometry regularizers.
# "l1_depth" is the ablation stand-in for "ranking" and shares its slot.
_REQUIRED = {
    "reference": ("photometric", "smoothness"),
    "orbit": ("diff", "orient", "distortion", "sparsity"),
}
_KNOWN = ("photometric", "ranking", "l1_depth", "orient", "distortion", "sparsity", "smoothness", "diff")


def photometric(rendered: Tensor, y: Tensor, mask: Tensor | None = None,
                background: Tensor | None = None) -> Tensor:
    """Mean squared error between a rendered view and the reference.

    With ``mask`` and ``background`` given, pixels outside the foreground
    mask are compared against ``background`` (the composited background
    image) instead of ``y`` — used when the reference has no meaningful
    background of its own.
    """
    if rendered.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(y.shape)}")
    target = y
    if mask is not None and background is not None:
        target = torch.where(mask[..., None], y, background)
    return ((rendered - target) ** 2).mean()


@dataclass
class RankingPairs:
    """Sampled pixel pairs with their pseudo-depth ordering.

    ``first``/``second`` are flat pixel indices; ``relation`` is +1 when the
    pseudo-depth says the first pixel is farther, -1 when nearer.
    """

    first: Tensor  # (K,) long
    second: Tensor  # (K,) long
    relation: Tensor  # (K,) int8, +1 or -1

    def __len__(self) -> int:
        return self.first.numel()

    @staticmethod
    def empty() -> "RankingPairs":
        return RankingPairs(torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long),
                            torch.zeros(0, dtype=torch.int8))


def sample_ranking_pairs(
    pseudo_depth: Tensor,
    mask: Tensor,
    count: int = 4096,
    tie_tol: float = 1e-3,
    generator: torch.Generator | None = None,
) -> RankingPairs:
    """Draw foreground pixel pairs whose pseudo-depth gap is decisive.

    Pairs closer than ``tie_tol`` times the masked depth range are
    discarded and redrawn. A constant depth map has no decisive pairs and
    returns an empty set with a warning.
    """
    flat_idx = mask.reshape(-1).nonzero()[:, 0]
    if flat_idx.numel() < 2:
        raise ValueError("mask must contain at least 2 pixels")
    depth_flat = pseudo_depth.reshape(-1)
    if not torch.isfinite(depth_flat[flat_idx]).all():
        raise ValueError("pseudo-depth must be finite on the mask")
    span = (depth_flat[flat_idx].max() - depth_flat[flat_idx].min()).item()
    if span <= 0:
        log.warning("pseudo-depth is constant on the mask; no ranking pairs")
        return RankingPairs.empty()
    gap_min = tie_tol * span

    firsts, seconds = [], []
    needed = count
    for _ in range(10_000):
        draw = torch.randint(0, flat_idx.numel(), (2 * needed,), generator=generator)
        a = flat_idx[draw[:needed]]
        b = flat_idx[draw[needed:]]
        keep = ((depth_flat[a] - depth_flat[b]).abs() >= gap_min) & (a != b)
        firsts.append(a[keep])
        seconds.append(b[keep])
        needed = count - sum(t.numel() for t in firsts)
        if needed <= 0:
            break
    else:
        raise RuntimeError("could not sample enough decisive ranking pairs")
    first = torch.cat(firsts)[:count]
    second = torch.cat(seconds)[:count]
    relation = torch.where(depth_flat[first] > depth_flat[second], 1, -1).to(torch.int8)
    return RankingPairs(first, second, relation)


def ranking_loss(rendered_depth: Tensor, pairs: RankingPairs) -> Tensor:
    """Hinge on rendered-depth pairs that contradict the pseudo-depth order.

    A pair marked "first farther" is violated when the rendered depth puts
    the second pixel deeper; the penalty is the (nonnegative) margin of the
    violation, averaged over pairs.
    """
    if len(pairs) == 0:
        return torch.zeros((), dtype=rendered_depth.dtype)
    flat = rendered_depth.reshape(-1)
    zi = flat[pairs.first]
    zj = flat[pairs.second]
    r = pairs.relation.to(rendered_depth.dtype)
    return torch.clamp(r * (zj - zi), min=0.0).mean()


def l1_depth_loss(rendered_depth: Tensor, pseudo_depth: Tensor, mask: Tensor) -> Tensor:
    """Absolute-value fit of rendered depth to the raw pseudo-depth values.

    This trusts the pseudo-depth scale and shift; it exists as the ablation
    counterpart of ``ranking_loss``.
    """
    if not mask.any():
        return torch.zeros((), dtype=rendered_depth.dtype)
    return (rendered_depth - pseudo_depth).abs()[mask].mean()


def orient_loss(weights: Tensor, normals: Tensor, valid: Tensor, directions: Tensor) -> Tensor:
    """Penalty on surface normals facing along the view direction.

    ``weights`` (R, N) enter detached so the penalty shapes normals, not
    opacity. Flagged-invalid normals are skipped. Summed per ray, averaged
    over rays.
    """
    dots = (normals * directions[:, None, :]).sum(-1)
    pen = weights.detach() * torch.clamp(dots, min=0.0) ** 2 * valid
    return pen.sum(dim=-1).mean()


def distortion_loss(weights: Tensor, endpoints: Tensor) -> Tensor:
    """Ray-compactness penalty over compositing weights.

    Pairwise term sum_ij w_i w_j |m_i - m_j| over interval midpoints plus
    the self-term (1/3) sum_i w_i^2 (s_{i+1} - s_i), averaged over rays.
    Midpoints of monotone endpoints are sorted, so the pairwise sum
    collapses to an O(N) prefix form.
    """
    if not (endpoints[..., 1:] > endpoints[..., :-1]).all():
        raise ValueError("endpoints must be strictly increasing")
    mid = 0.5 * (endpoints[..., 1:] + endpoints[..., :-1])
    delta = endpoints[..., 1:] - endpoints[..., :-1]
    w_cum = torch.cumsum(weights, dim=-1) - weights
    wm_cum = torch.cumsum(weights * mid, dim=-1) - weights * mid
    pairwise = 2.0 * (weights * (mid * w_cum - wm_cum)).sum(dim=-1)
    self_term = (weights**2 * delta).sum(dim=-1) / 3.0
    return (pairwise + self_term).mean()


def sparsity_loss(alpha: Tensor) -> Tensor:
    """L1 occupancy penalty on the alpha map."""
    return alpha.abs().mean()


def smoothness_loss(rendered_depth: Tensor, guide: Tensor) -> Tensor:
    """Second-order depth smoothness, relaxed across guide-image edges.

    Finite-difference |d_xx| + |d_xy| + |d_yy| of the depth at unit pixel
    spacing, weighted by exp(-|laplacian|) of the grayscale guide, averaged
    over interior pixels.
    """
    if rendered_depth.shape != guide.shape[:2]:
        raise ValueError("depth and guide image must share spatial shape")
    gray = guide.mean(dim=-1) if guide.dim() == 3 else guide
    d = rendered_depth
    dxx = d[1:-1, 2:] - 2 * d[1:-1, 1:-1] + d[1:-1, :-2]
    dyy = d[2:, 1:-1] - 2 * d[1:-1, 1:-1] + d[:-2, 1:-1]
    dxy = (d[2:, 2:] - d[2:, :-2] - d[:-2, 2:] + d[:-2, :-2]) / 4.0
    lap = (
        gray[1:-1, 2:] + gray[1:-1, :-2] + gray[2:, 1:-1] + gray[:-2, 1:-1]
        - 4 * gray[1:-1, 1:-1]
    )
    return (torch.exp(-lap.abs()) * (dxx.abs() + dxy.abs() + dyy.abs())).mean()


def total_loss(components: dict[str, Tensor], weights: LossWeights, regime: str) -> Tensor:
    """Weighted sum of the loss components active in a regime.

    The reference regime must supply photometric + smoothness and one of
    ranking / l1_depth; orbit must supply diff + orient + distortion +
    sparsity. Extra known components are allowed and weighted; unknown
    names fault.
    """
    if regime not in _REQUIRED:
        raise ValueError(f"unknown regime {regime!r}")
    for name in components:
        if name not in _KNOWN:
            raise ValueError(f"unknown loss component {name!r}")
    missing = [k for k in _REQUIRED[regime] if k not in components]
    if regime == "reference" and not ("ranking" in components or "l1_depth" in components):
        missing.append("ranking")
    if missing:
        raise ValueError(f"regime {regime!r} missing components: {missing}")
    total = torch.zeros(())
    for name, value in components.items():
        weight = weights.ranking if name == "l1_depth" else getattr(weights, name)
        total = total + weight * value
    return total
