import math

import pytest
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from lift3d.fields import (
    Aabb,
    BackgroundField,
    FieldConfig,
    HashGrid,
    HashGridConfig,
    RadianceField,
    compute_normal,
)
from testutil import autograd_check, rel_err


def small_field(seed=0, dtype=torch.float32) -> RadianceField:
    """A reduced configuration with fewer than 100 parameters."""
    cfg = FieldConfig(
        grid=HashGridConfig(levels=2, base_resolution=2, finest_resolution=4,
                            features_per_entry=1, table_size_log2=3),
        hidden_dim=4,
    )
    g = torch.Generator().manual_seed(seed)
    field = RadianceField(cfg, generator=g)
    return field.to(dtype)


class TestHashGrid:
    def test_level_resolutions_match_configured_range(self):
        cfg = HashGridConfig()
        assert cfg.level_resolution(0) == 16
        assert cfg.level_resolution(15) == 2048

    def test_growth_factor(self):
        # Independent evaluation of (finest/base)**(1/(levels-1)).
        expected = math.exp(math.log(2048 / 16) / 15)
        cfg = HashGridConfig()
        assert cfg.growth_factor == pytest.approx(expected, rel=1e-12)
        assert cfg.growth_factor == pytest.approx(1.38191, abs=1e-5)

    def test_zero_table_gives_zero_features(self):
        grid = HashGrid(HashGridConfig(levels=4, finest_resolution=64, table_size_log2=6))
        with torch.no_grad():
            grid.table.zero_()
        p = torch.rand(32, 3) * 2 - 1
        assert torch.all(grid(p) == 0)

    def test_out_of_box_points_clamp_to_surface(self):
        grid = HashGrid(HashGridConfig(levels=4, finest_resolution=64, table_size_log2=6),
                        generator=torch.Generator().manual_seed(1))
        outside = torch.tensor([[2.0, 0.3, -5.0]])
        clamped = torch.tensor([[1.0, 0.3, -1.0]])
        assert torch.equal(grid(outside), grid(clamped))

    def test_interpolation_continuity_on_transect(self):
        cfg = HashGridConfig(levels=4, base_resolution=4, finest_resolution=32, table_size_log2=8)
        grid = HashGrid(cfg, generator=torch.Generator().manual_seed(2))
        t = torch.linspace(-0.9, 0.9, 4001, dtype=torch.float64)
        p = torch.stack([t, 0.13 * torch.ones_like(t), -0.21 * torch.ones_like(t)], dim=-1)
        feats = grid.double()(p)
        step = (t[1] - t[0]).item()
        max_abs = grid.table.abs().max().item()
        diffs = (feats[1:] - feats[:-1]).abs()
        for level in range(cfg.levels):
            res = cfg.level_resolution(level)
            # Trilinear features are piecewise linear with per-axis slope
            # bounded by 2 * resolution * max|entry| in scene units.
            bound = 2.0 * res * max_abs * step * 1.01 + 1e-15
            block = diffs[:, level * cfg.features_per_entry:(level + 1) * cfg.features_per_entry]
            assert block.max().item() <= bound

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            HashGridConfig(levels=1)
        with pytest.raises(ValueError):
            HashGridConfig(base_resolution=64, finest_resolution=32)


class TestRadianceField:
    def test_zero_params_give_sigmoid_midpoint(self):
        field = small_field()
        with torch.no_grad():
            for p in field.parameters():
                p.zero_()
        sigma, albedo = field.query(torch.zeros(5, 3))
        assert torch.allclose(sigma, torch.full((5,), 0.5 * field.cfg.density_scale))
        assert torch.allclose(albedo, torch.full((5, 3), 0.5))

    def test_large_negative_density_logit_gives_zero_density(self):
        field = small_field()
        with torch.no_grad():
            for p in field.parameters():
                p.zero_()
            field.fc_out.bias[3] = -60.0
        sigma, _ = field.query(torch.rand(8, 3))
        assert torch.all(sigma >= 0)
        assert sigma.max().item() < 1e-20

    def test_query_deterministic(self):
        field = small_field(seed=3)
        p = torch.rand(16, 3, generator=torch.Generator().manual_seed(4)) * 2 - 1
        s1, a1 = field.query(p)
        s2, a2 = field.query(p)
        assert torch.equal(s1, s2) and torch.equal(a1, a2)

    def test_density_bounded_on_random_points(self):
        field = RadianceField(FieldConfig(
            grid=HashGridConfig(levels=4, finest_resolution=64, table_size_log2=8)),
            generator=torch.Generator().manual_seed(5))
        p = torch.rand(10_000, 3, generator=torch.Generator().manual_seed(6)) * 4 - 2
        sigma, albedo = field.query(p)
        assert torch.all(sigma >= 0) and torch.all(sigma <= field.cfg.density_scale)
        assert torch.all(albedo >= 0) and torch.all(albedo <= 1)

    def test_non_finite_params_fault(self):
        field = small_field()
        with torch.no_grad():
            field.fc_out.weight[0, 0] = float("nan")
        with pytest.raises(FloatingPointError):
            field.query(torch.zeros(2, 3))

    def test_param_gradients_match_finite_differences(self):
        field = small_field(seed=7, dtype=torch.float64)
        n_params = sum(p.numel() for p in field.parameters())
        assert n_params <= 100
        pts = torch.rand(6, 3, dtype=torch.float64,
                         generator=torch.Generator().manual_seed(8)) * 1.6 - 0.8
        proj_s = torch.randn(6, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
        proj_a = torch.randn(6, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(10))

        params = [p for p in field.parameters()]
        vec0 = parameters_to_vector(params).detach()

        def f(vec):
            vector_to_parameters(vec, params)
            sigma, albedo = field.query(pts)
            return (sigma * proj_s).sum() + (albedo * proj_a).sum()

        vec = vec0.clone().requires_grad_(True)
        vector_to_parameters(vec0, params)
        sigma, albedo = field.query(pts)
        loss = (sigma * proj_s).sum() + (albedo * proj_a).sum()
        loss.backward()
        g_auto = torch.cat([p.grad.reshape(-1) for p in params])

        from testutil import fd_grad
        g_fd = fd_grad(lambda v: f(v).item(), vec0, eps=1e-6)
        vector_to_parameters(vec0, params)
        assert rel_err(g_auto, g_fd) < 1e-4


class _LinearRampField:
    """Analytic density sigma(x, y, z) = x + 2 (positive inside the box)."""

    bounding_box = Aabb()

    def density(self, p):
        return p[..., 0] + 2.0


class _GaussianBlobField:
    bounding_box = Aabb()

    def density(self, p):
        r2 = (p**2).sum(-1)
        return 5.0 * torch.exp(-r2 / (2 * 0.3**2))


class TestNormals:
    def test_linear_ramp_normal_points_down_gradient(self):
        n, valid = compute_normal(_LinearRampField(), torch.tensor([[0.2, 0.1, -0.3]]),
                                  mode="finite_difference", h=1e-3)
        assert valid.all()
        assert torch.allclose(n, torch.tensor([[-1.0, 0.0, 0.0]]), atol=1e-6)

    def test_radial_field_normal_points_outward(self):
        field = _GaussianBlobField()
        p = torch.tensor([[0.3, 0.2, -0.1]], dtype=torch.float64)
        n, valid = compute_normal(field, p, mode="analytic")
        assert valid.all()
        outward = p / p.norm()
        assert torch.allclose(n, outward, atol=1e-10)

    def test_finite_difference_matches_analytic_on_smooth_field(self):
        field = _GaussianBlobField()
        g = torch.Generator().manual_seed(11)
        p = (torch.rand(50, 3, generator=g, dtype=torch.float64) - 0.5) * 0.8
        n_fd, v_fd = compute_normal(field, p, mode="finite_difference", h=1e-3)
        n_an, v_an = compute_normal(field, p, mode="analytic")
        keep = v_fd & v_an
        assert keep.sum() > 40
        assert (n_fd[keep] - n_an[keep]).norm(dim=-1).max().item() < 1e-3

    def test_unit_length_except_flagged(self):
        field = RadianceField(FieldConfig(
            grid=HashGridConfig(levels=4, finest_resolution=64, table_size_log2=8)),
            generator=torch.Generator().manual_seed(12))
        p = torch.rand(500, 3, generator=torch.Generator().manual_seed(13)) * 2 - 1
        n, valid = compute_normal(field, p, mode="finite_difference", h=1e-3)
        norms = n[valid].norm(dim=-1)
        assert torch.all((norms - 1).abs() < 1e-5)
        assert torch.all(n[~valid] == 0)

    def test_degenerate_gradient_flagged(self):
        class Flat:
            bounding_box = Aabb()

            def density(self, p):
                return torch.ones(p.shape[:-1], dtype=p.dtype)

        n, valid = compute_normal(Flat(), torch.zeros(4, 3))
        assert not valid.any()
        assert torch.all(n == 0)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            compute_normal(_LinearRampField(), torch.zeros(1, 3), mode="bogus")


class TestBackgroundField:
    def test_zero_params_give_mid_gray(self):
        bg = BackgroundField()
        with torch.no_grad():
            for p in bg.parameters():
                p.zero_()
        out = bg(torch.tensor([[0.0, 0.0, 1.0]]))
        assert torch.allclose(out, torch.full((1, 3), 0.5))

    def test_deterministic_and_direction_dependent(self):
        bg = BackgroundField(generator=torch.Generator().manual_seed(14))
        d = torch.tensor([[0.0, 0.0, 1.0]])
        assert torch.equal(bg(d), bg(d))
        # Antipodal directions generally map to different colors.
        assert not torch.allclose(bg(d), bg(-d))

    def test_output_in_unit_interval(self):
        bg = BackgroundField(generator=torch.Generator().manual_seed(15))
        d = torch.randn(200, 3, generator=torch.Generator().manual_seed(16))
        d = d / d.norm(dim=-1, keepdim=True)
        out = bg(d)
        assert torch.all(out >= 0) and torch.all(out <= 1)
