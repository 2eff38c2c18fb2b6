"""Scene representation: hash-grid radiance field and view-conditioned background.

The foreground field maps a 3D position to a density and an albedo color.
Density uses a bounded (sigmoid) activation scaled by ``density_scale``;
albedo is a plain sigmoid. A separate tiny network maps a unit view
direction to a background color.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

# Per-axis primes for spatial hashing of integer lattice coordinates.
_HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box in scene units."""

    lo: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not all(l < h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate bounding box: lo={self.lo} hi={self.hi}")

    def tensors(self, dtype=torch.float32, device=None) -> tuple[Tensor, Tensor]:
        lo = torch.tensor(self.lo, dtype=dtype, device=device)
        hi = torch.tensor(self.hi, dtype=dtype, device=device)
        return lo, hi

    def clamp(self, p: Tensor) -> Tensor:
        """Clamp points (..., 3) onto the box surface. Out-of-box queries are
        defined as queries of the nearest surface point, never an error."""
        lo, hi = self.tensors(p.dtype, p.device)
        return torch.clamp(p, lo, hi)


@dataclass
class HashGridConfig:
    levels: int = 16
    base_resolution: int = 16
    finest_resolution: int = 2048
    features_per_entry: int = 2
    table_size_log2: int = 19
    bounding_box: Aabb = field(default_factory=Aabb)

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if not self.base_resolution < self.finest_resolution:
            raise ValueError("base_resolution must be < finest_resolution")
        if self.features_per_entry < 1 or self.table_size_log2 < 1:
            raise ValueError("features_per_entry and table_size_log2 must be >= 1")

    @property
    def growth_factor(self) -> float:
        return (self.finest_resolution / self.base_resolution) ** (1.0 / (self.levels - 1))

    def level_resolution(self, level: int) -> int:
        # The epsilon keeps exact powers (e.g. the finest level) from landing
        # one below their intended resolution through floating-point floor.
        return int(math.floor(self.base_resolution * self.growth_factor**level + 1e-6))

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_entry


class HashGrid(nn.Module):
    """Multiresolution hashed feature grid with trilinear interpolation.

    Each level stores a table of ``2**table_size_log2`` feature vectors.
    Integer corner coordinates are hashed with per-axis primes; features of
    the 8 surrounding corners are blended trilinearly and levels are
    concatenated coarse to fine.
    """

    def __init__(self, cfg: HashGridConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.table_size = 2**cfg.table_size_log2
        table = torch.empty(cfg.levels, self.table_size, cfg.features_per_entry)
        table.uniform_(-1e-4, 1e-4, generator=generator)
        self.table = nn.Parameter(table)
        resolutions = [cfg.level_resolution(l) for l in range(cfg.levels)]
        if any(b > a for a, b in zip(resolutions[1:], resolutions)):
            raise ValueError(f"level resolutions must be nondecreasing, got {resolutions}")
        self.resolutions = resolutions
        corners = torch.tensor(
            [[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=torch.long
        )
        self.register_buffer("corners", corners, persistent=False)

    def forward(self, p: Tensor) -> Tensor:
        """Encode points (..., 3) to features (..., levels * features_per_entry)."""
        cfg = self.cfg
        shape = p.shape[:-1]
        p = cfg.bounding_box.clamp(p.reshape(-1, 3))
        lo, hi = cfg.bounding_box.tensors(p.dtype, p.device)
        unit = (p - lo) / (hi - lo)  # in [0, 1]^3

        out = []
        for level, res in enumerate(self.resolutions):
            scaled = unit * res
            cell = scaled.floor().long().clamp_(max=res - 1)
            frac = scaled - cell  # (N, 3)
            idx = self._hash(cell[:, None, :] + self.corners[None, :, :])  # (N, 8)
            # Trilinear weights: product over axes of frac or (1 - frac).
            w = torch.where(self.corners[None].bool(), frac[:, None, :], 1.0 - frac[:, None, :])
            w = w.prod(dim=-1)  # (N, 8)
            feat = (w[..., None] * self.table[level][idx]).sum(dim=1)
            out.append(feat)
        return torch.cat(out, dim=-1).reshape(*shape, cfg.feature_dim)

    def _hash(self, coords: Tensor) -> Tensor:
        h = coords[..., 0] * _HASH_PRIMES[0]
        h = h ^ (coords[..., 1] * _HASH_PRIMES[1])
        h = h ^ (coords[..., 2] * _HASH_PRIMES[2])
        return h % self.table_size


def _init_linear(layer: nn.Linear, generator: torch.Generator | None) -> None:
    # Default torch init (kaiming uniform, a=sqrt(5)) with an explicit generator.
    fan_in = layer.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    layer.weight.data.uniform_(-bound, bound, generator=generator)
    if layer.bias is not None:
        layer.bias.data.uniform_(-bound, bound, generator=generator)


@dataclass
class FieldConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    hidden_dim: int = 64
    density_scale: float = 25.0
    density_bias: float = -4.0

    def __post_init__(self):
        if self.density_scale <= 0:
            raise ValueError("density_scale must be positive")


class RadianceField(nn.Module):
    """Foreground scene: hash-grid encoder plus a 4-layer residual MLP.

    The head emits 4 channels: 3 albedo logits and one density logit.
    Activated density is ``density_scale * sigmoid(raw)``, so it is bounded
    in [0, density_scale]; albedo is sigmoid-bounded in [0, 1]^3.
    """

    def __init__(self, cfg: FieldConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        self.grid = HashGrid(self.cfg.grid, generator)
        h = self.cfg.hidden_dim
        self.fc_in = nn.Linear(self.cfg.grid.feature_dim, h)
        self.fc_mid1 = nn.Linear(h, h)
        self.fc_mid2 = nn.Linear(h, h)
        self.fc_out = nn.Linear(h, 4)
        for layer in (self.fc_in, self.fc_mid1, self.fc_mid2, self.fc_out):
            _init_linear(layer, generator)
        # Start mostly empty so supervision grows the object instead of
        # carving it out of fog.
        self.fc_out.bias.data[3] = self.cfg.density_bias

    @property
    def bounding_box(self) -> Aabb:
        return self.cfg.grid.bounding_box

    def raw(self, p: Tensor) -> Tensor:
        feat = self.grid(p)
        x = torch.nn.functional.silu(self.fc_in(feat))
        x = x + torch.nn.functional.silu(self.fc_mid1(x))
        x = x + torch.nn.functional.silu(self.fc_mid2(x))
        return self.fc_out(x)

    def query(self, p: Tensor) -> tuple[Tensor, Tensor]:
        """Evaluate the field at points (..., 3).

        Returns (density (...,), albedo (..., 3)).
        """
        raw = self.raw(p)
        if not torch.isfinite(raw).all():
            raise FloatingPointError(
                "radiance field produced non-finite output; parameters are likely corrupt"
            )
        albedo = torch.sigmoid(raw[..., :3])
        density = self.cfg.density_scale * torch.sigmoid(raw[..., 3])
        return density, albedo

    def density(self, p: Tensor) -> Tensor:
        return self.query(p)[0]


class BackgroundField(nn.Module):
    """Direction-only background color: 3 fully-connected layers."""

    def __init__(self, hidden_dim: int = 32, generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = nn.Linear(3, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, hidden_dim)
        self.fc3 = nn.Linear(hidden_dim, 3)
        for layer in (self.fc1, self.fc2, self.fc3):
            _init_linear(layer, generator)

    def forward(self, d: Tensor) -> Tensor:
        """Map unit directions (..., 3) to RGB (..., 3) in [0, 1]."""
        x = torch.nn.functional.silu(self.fc1(d))
        x = torch.nn.functional.silu(self.fc2(x))
        return torch.sigmoid(self.fc3(x))


def compute_normal(
    field,
    p: Tensor,
    mode: str = "finite_difference",
    h: float = 1e-3,
    eps_grad: float = 1e-8,
) -> tuple[Tensor, Tensor]:
    """Surface normal as the negated, normalized density gradient.

    ``mode`` selects analytic autograd gradients or 6-query axis-aligned
    central differences with step ``h``. Points where the gradient norm
    falls below ``eps_grad`` get a zero normal and a False validity flag;
    callers must exclude those from shading and orientation penalties.

    Returns (normals (..., 3), valid (...,) bool).
    """
    shape = p.shape[:-1]
    p = p.reshape(-1, 3)
    if mode == "analytic":
        keep_graph = torch.is_grad_enabled()
        with torch.enable_grad():
            q = p.detach().requires_grad_(True)
            sigma = field.density(q)
            (grad,) = torch.autograd.grad(sigma.sum(), q, create_graph=keep_graph)
    elif mode == "finite_difference":
        offsets = torch.zeros(6, 3, dtype=p.dtype, device=p.device)
        for a in range(3):
            offsets[2 * a, a] = h
            offsets[2 * a + 1, a] = -h
        probes = p[None, :, :] + offsets[:, None, :]
        sigma = field.density(probes.reshape(-1, 3)).reshape(6, -1)
        grad = torch.stack([(sigma[2 * a] - sigma[2 * a + 1]) / (2 * h) for a in range(3)], dim=-1)
    else:
        raise ValueError(f"unknown normal mode: {mode!r}")

    norm = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
    valid = norm[..., 0] > eps_grad
    normal = torch.where(valid[..., None], -grad / torch.clamp(norm, min=eps_grad), torch.zeros_like(grad))
    return normal.reshape(*shape, 3), valid.reshape(shape)
