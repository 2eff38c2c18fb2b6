import copy

import pytest
import torch

from lift3d.adaptation import (
    AugmentParams,
    FinetuneConfig,
    adaptation_objective,
    augment_image,
    build_guidance_sampler,
    draw_augment_params,
    evaluate_objective,
    finetune_denoiser,
    interpolate_embedding,
    optimize_embedding,
)
from lift3d.diffusion import denoiser_elbo_loss, perturb, predict_x0
from lift3d.imageops import resize_chw, to_signed, to_unit


@pytest.fixture(scope="module")
def reference_image(scene_family):
    # A held-out render of the family serves as the single-image target.
    return scene_family.heldout_images[0].permute(1, 2, 0)


@pytest.fixture(scope="module")
def z_init(trained_encoders, scene_family):
    with torch.no_grad():
        return trained_encoders.embed_text(scene_family.heldout_prompts[0])


class TestOptimizeEmbedding:
    def test_zero_steps_returns_init(self, trained_denoiser, reference_image, z_init,
                                     schedule, trained_encoders):
        cfg = FinetuneConfig(stage1_steps=0)
        z_star = optimize_embedding(trained_denoiser, reference_image, z_init, schedule,
                                    trained_encoders, cfg, torch.Generator().manual_seed(0))
        assert torch.equal(z_star, z_init)

    def test_objective_improves_and_denoiser_untouched(self, trained_denoiser, reference_image,
                                                       z_init, schedule, trained_encoders):
        before_params = copy.deepcopy(trained_denoiser.state_dict())
        cfg = FinetuneConfig(stage1_steps=250, lr_stage1=5e-3)
        z_star = optimize_embedding(trained_denoiser, reference_image, z_init, schedule,
                                    trained_encoders, cfg, torch.Generator().manual_seed(1))

        x0 = to_signed(resize_chw(reference_image.permute(2, 0, 1),
                                  trained_denoiser.native_resolution))
        with torch.no_grad():
            y_embed = trained_encoders.embed_image(to_unit(x0))
        val_init = evaluate_objective(trained_denoiser, x0, z_init, schedule,
                                      trained_encoders, y_embed, noise_seed=7)
        val_star = evaluate_objective(trained_denoiser, x0, z_star, schedule,
                                      trained_encoders, y_embed, noise_seed=7)
        assert val_star <= val_init

        after_params = trained_denoiser.state_dict()
        for k in before_params:
            assert torch.equal(before_params[k], after_params[k])

    def test_similarity_to_reference_increases(self, trained_denoiser, reference_image,
                                               z_init, schedule, trained_encoders):
        cfg = FinetuneConfig(stage1_steps=250, lr_stage1=5e-3)
        z_star = optimize_embedding(trained_denoiser, reference_image, z_init, schedule,
                                    trained_encoders, cfg, torch.Generator().manual_seed(2))
        x0 = to_signed(resize_chw(reference_image.permute(2, 0, 1),
                                  trained_denoiser.native_resolution))
        with torch.no_grad():
            y_embed = trained_encoders.embed_image(to_unit(x0))

        def mean_similarity(z):
            g = torch.Generator().manual_seed(55)
            sims = []
            with torch.no_grad():
                for t in (300, 500, 700):
                    for _ in range(4):
                        eps = torch.randn(x0.shape, generator=g)
                        x_t = perturb(x0, t, eps, schedule)
                        eps_hat = trained_denoiser.predict(x_t, t, z)
                        x0_hat = predict_x0(x_t, eps_hat, t, schedule).clamp(-1, 1)
                        sims.append((trained_encoders.embed_image(to_unit(x0_hat)) * y_embed).sum().item())
            return sum(sims) / len(sims)

        assert mean_similarity(z_star) > mean_similarity(z_init)


class TestAugmentations:
    def test_identity_params_exact(self, reference_image):
        img = reference_image.permute(2, 0, 1)
        out = augment_image(img, AugmentParams())
        assert out is img

    def test_preserve_range_and_shape(self):
        g = torch.Generator().manual_seed(3)
        img = torch.rand(3, 24, 24, generator=g)
        cfg = FinetuneConfig()
        for _ in range(25):
            params = draw_augment_params(cfg, g)
            out = augment_image(img, params)
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_param_ranges_respect_config(self):
        cfg = FinetuneConfig(aug_shift_frac=0.05, aug_scale=(0.95, 1.05), aug_rotate_deg=10.0)
        g = torch.Generator().manual_seed(4)
        for _ in range(200):
            p = draw_augment_params(cfg, g)
            assert abs(p.shift[0]) <= 0.05 and abs(p.shift[1]) <= 0.05
            assert 0.95 <= p.scale <= 1.05
            assert abs(p.rotate_deg) <= 10.0

    def test_flip_only_mirrors(self):
        img = torch.rand(3, 8, 8, generator=torch.Generator().manual_seed(5))
        out = augment_image(img, AugmentParams(flip=True))
        assert torch.equal(out, img.flip(-1))


@pytest.fixture(scope="module")
def adapted_denoiser(trained_denoiser, reference_image, z_init, schedule, trained_encoders):
    # Default fine-tuning configuration, shared by the behavioral tests.
    adapted = finetune_denoiser(trained_denoiser, reference_image, z_init, schedule,
                                trained_encoders, FinetuneConfig(),
                                torch.Generator().manual_seed(7))
    return adapted


class TestFinetuneDenoiser:
    def test_zero_steps_copy_is_bit_exact(self, trained_denoiser, reference_image, z_init,
                                          schedule, trained_encoders):
        cfg = FinetuneConfig(stage2_steps=0)
        adapted = finetune_denoiser(trained_denoiser, reference_image, z_init, schedule,
                                    trained_encoders, cfg, torch.Generator().manual_seed(6))
        assert adapted is not trained_denoiser
        for a, b in zip(adapted.state_dict().values(), trained_denoiser.state_dict().values()):
            assert torch.equal(a, b)

    def test_finetune_lowers_elbo_on_reference(self, trained_denoiser, adapted_denoiser,
                                               reference_image, z_init, schedule):
        adapted = adapted_denoiser
        x0 = to_signed(resize_chw(reference_image.permute(2, 0, 1),
                                  trained_denoiser.native_resolution))[None]
        t = torch.tensor([500])

        def elbo(model):
            g = torch.Generator().manual_seed(77)
            with torch.no_grad():
                vals = [denoiser_elbo_loss(model, x0, z_init[None], schedule,
                                           generator=g, t=t).item() for _ in range(64)]
            return sum(vals) / len(vals)

        assert elbo(adapted) < elbo(trained_denoiser)

    def test_z_star_not_mutated(self, trained_denoiser, reference_image, z_init,
                                schedule, trained_encoders):
        z_before = z_init.clone()
        cfg = FinetuneConfig(stage2_steps=30, lr_stage2=1e-4)
        finetune_denoiser(trained_denoiser, reference_image, z_init, schedule,
                          trained_encoders, cfg, torch.Generator().manual_seed(8))
        assert torch.equal(z_init, z_before)

    def test_diversity_preserved_with_higher_similarity(self, trained_denoiser, adapted_denoiser,
                                                        reference_image, z_init, schedule,
                                                        trained_encoders):
        adapted = adapted_denoiser
        x0 = to_signed(resize_chw(reference_image.permute(2, 0, 1),
                                  trained_denoiser.native_resolution))
        with torch.no_grad():
            y_embed = trained_encoders.embed_image(to_unit(x0))

        def probe(model):
            g = torch.Generator().manual_seed(99)
            t = 800
            outs, sims = [], []
            with torch.no_grad():
                for _ in range(16):
                    x_t = perturb(x0, t, torch.randn(x0.shape, generator=g), schedule)
                    x0_hat = predict_x0(x_t, model.predict(x_t, t, z_init), t, schedule).clamp(-1, 1)
                    outs.append(x0_hat)
                    sims.append((trained_encoders.embed_image(to_unit(x0_hat)) * y_embed).sum().item())
            diffs = [
                (outs[i] - outs[j]).abs().mean().item()
                for i in range(16) for j in range(i + 1, 16)
            ]
            return sum(diffs) / len(diffs), sum(sims) / len(sims)

        spread_after, sim_after = probe(adapted)
        _, sim_before = probe(trained_denoiser)
        assert spread_after > 0.0  # predictions have not collapsed to one image
        assert sim_after > sim_before


class TestInterpolation:
    def test_endpoints_exact(self):
        g = torch.Generator().manual_seed(10)
        z_star = torch.randn(32, generator=g)
        z = torch.randn(32, generator=g)
        assert torch.equal(interpolate_embedding(z_star, z, 1.0), z_star)
        assert torch.equal(interpolate_embedding(z_star, z, 0.0), z)

    def test_midpoint_with_zero_original(self):
        z_star = torch.randn(16, generator=torch.Generator().manual_seed(11))
        z = torch.zeros(16)
        assert torch.allclose(interpolate_embedding(z_star, z, 0.5), 0.5 * z_star)

    def test_linearity(self):
        g = torch.Generator().manual_seed(12)
        z_star = torch.randn(24, generator=g)
        z = torch.randn(24, generator=g)
        lhs = interpolate_embedding(z_star, z, 0.3) + interpolate_embedding(z_star, z, 0.9)
        rhs = 2.0 * interpolate_embedding(z_star, z, 0.6)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_dimension_mismatch_faults(self):
        with pytest.raises(ValueError):
            interpolate_embedding(torch.zeros(8), torch.zeros(9), 0.5)


class TestGuidanceSampler:
    def _sampler(self, fraction):
        cfg = FinetuneConfig(alternation_fraction=fraction)
        return build_guidance_sampler(torch.ones(8), torch.zeros(8), cfg)

    def test_fraction_zero_always_unconditional_negative(self):
        s = self._sampler(0.0)
        g = torch.Generator().manual_seed(13)
        for _ in range(50):
            draw = s.draw(g)
            assert draw.mode == "uncond" and draw.z_neg is None

    def test_fraction_one_always_original_negative(self):
        s = self._sampler(1.0)
        g = torch.Generator().manual_seed(14)
        for _ in range(50):
            draw = s.draw(g)
            assert draw.mode == "original"
            assert torch.equal(draw.z_neg, torch.zeros(8))

    def test_half_fraction_frequency(self):
        s = self._sampler(0.5)
        g = torch.Generator().manual_seed(15)
        n = 100_000
        hits = sum(s.draw(g).mode == "original" for _ in range(n))
        assert abs(hits / n - 0.5) < 0.01

    def test_conditional_branch_always_interpolated(self):
        s = self._sampler(0.5)
        g = torch.Generator().manual_seed(16)
        for _ in range(10):
            assert torch.equal(s.draw(g).z_cond, torch.ones(8))


class TestDivergenceGuard:
    def test_diverging_embedding_optimization_aborts(self, trained_denoiser, reference_image,
                                                      z_init, schedule, trained_encoders):
        cfg = FinetuneConfig(stage1_steps=400, lr_stage1=1e4,  # absurd rate forces blow-up
                             divergence_patience=20)
        with pytest.raises(RuntimeError, match="diverged"):
            optimize_embedding(trained_denoiser, reference_image, z_init, schedule,
                               trained_encoders, cfg, torch.Generator().manual_seed(17))
