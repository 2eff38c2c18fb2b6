"""Session fixtures: a small synthetic scene family and toy models trained on it.

Training these once per session keeps the denoiser/encoder-dependent tests
fast while still exercising real trained weights.
"""

import pytest
import torch

from lift3d.diffusion import NoiseSchedule, ToyDenoiser, train_toy_denoiser
from lift3d.encoders import make_encoder_pair, train_contrastive
from lift3d.scenes import make_scene_family

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def scene_family():
    return make_scene_family(views_per_scene=6, resolution=32, seed=0)


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def trained_encoders(scene_family):
    pair = make_encoder_pair(embed_dim=64, native_resolution=32, seed=11)
    train_contrastive(
        pair,
        scene_family.images,
        scene_family.prompts,
        steps=500,
        generator=torch.Generator().manual_seed(12),
    )
    return pair


@pytest.fixture(scope="session")
def eval_encoders(scene_family):
    # Distinct seed and a shifted training split from the guidance encoder.
    pair = make_encoder_pair(embed_dim=64, native_resolution=32, seed=77)
    half = scene_family.images.shape[0] // 2
    train_contrastive(
        pair,
        scene_family.images[half:],
        scene_family.prompts[half:],
        steps=500,
        generator=torch.Generator().manual_seed(78),
    )
    return pair


@pytest.fixture(scope="session")
def trained_denoiser(scene_family, trained_encoders, schedule):
    denoiser = ToyDenoiser(
        native_resolution=32, embed_dim=64, generator=torch.Generator().manual_seed(21)
    )
    with torch.no_grad():
        embeds = torch.stack([trained_encoders.embed_text(p) for p in scene_family.prompts])
    train_toy_denoiser(
        denoiser,
        2.0 * scene_family.images - 1.0,
        embeds,
        schedule,
        steps=700,
        generator=torch.Generator().manual_seed(22),
    )
    return denoiser
