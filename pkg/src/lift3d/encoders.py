"""Embedding spaces for guidance and evaluation.

A pair of toy encoders (convolutional image tower, embedding-lookup text
tower) maps images and prompts into a shared space where an inner product
scores similarity. The embedding distance between a rendered view and the
reference image is the evaluation metric; evaluation must use an encoder
distinct from the one that guided training.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .imageops import resize_chw

VOCAB_SIZE = 512


def normalize_embedding(v: Tensor) -> Tensor:
    """L2-normalize along the last axis. Idempotent."""
    return v / torch.clamp(v.norm(dim=-1, keepdim=True), min=1e-12)


def similarity(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two embeddings; in [-1, 1] when both are normalized."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"embedding dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return (a * b).sum(dim=-1)


def tokenize(prompt: str) -> list[int]:
    """Stable hash tokenization: lowercase words to ids in [0, VOCAB_SIZE)."""
    words = re.findall(r"[a-z0-9]+", prompt.lower())
    return [zlib.crc32(w.encode()) % VOCAB_SIZE for w in words] or [0]


def _init_param(p: Tensor, generator: torch.Generator | None) -> None:
    if p.dim() > 1:
        bound = 1.0 / p[0].numel() ** 0.5
        p.data.uniform_(-bound, bound, generator=generator)
    else:
        p.data.zero_()


class ToyImageEncoder(nn.Module):
    """Small strided conv tower ending in an L2-normalized embedding."""

    def __init__(
        self,
        embed_dim: int = 64,
        native_resolution: int = 32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.native_resolution = native_resolution
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.head = nn.Linear(64, embed_dim)
        for p in self.parameters():
            _init_param(p, generator)

    def forward(self, img: Tensor) -> Tensor:
        """Embed (3, H, W) or (B, 3, H, W) images in [0, 1]; output is unit norm."""
        batched = img.dim() == 4
        if not batched:
            img = img[None]
        x = resize_chw(img, self.native_resolution)
        x = torch.nn.functional.silu(self.conv1(x))
        x = torch.nn.functional.silu(self.conv2(x))
        x = torch.nn.functional.silu(self.conv3(x))
        z = self.head(x.mean(dim=(-2, -1)))
        z = normalize_embedding(z)
        return z if batched else z[0]

    def embed_image(self, img: Tensor) -> Tensor:
        return self(img)


class ToyTextEncoder(nn.Module):
    """Token-embedding lookup with mean pooling; output stays unnormalized."""

    def __init__(self, embed_dim: int = 64, generator: torch.Generator | None = None):
        super().__init__()
        self.embed_dim = embed_dim
        self.table = nn.Embedding(VOCAB_SIZE, 64)
        self.head = nn.Linear(64, embed_dim)
        for p in self.parameters():
            _init_param(p, generator)

    def forward(self, prompt: str) -> Tensor:
        ids = torch.tensor(tokenize(prompt), dtype=torch.long)
        return self.head(self.table(ids).mean(dim=0))


@dataclass
class EncoderPair:
    image: ToyImageEncoder
    text: ToyTextEncoder

    def __post_init__(self):
        if self.image.embed_dim != self.text.embed_dim:
            raise ValueError("image and text encoders must share an embedding dimension")

    @property
    def embed_dim(self) -> int:
        return self.image.embed_dim

    def embed_image(self, img_chw: Tensor) -> Tensor:
        return self.image(img_chw)

    def embed_text(self, prompt: str) -> Tensor:
        return self.text(prompt)


def make_encoder_pair(
    embed_dim: int = 64, native_resolution: int = 32, seed: int = 0
) -> EncoderPair:
    g = torch.Generator().manual_seed(seed)
    return EncoderPair(
        image=ToyImageEncoder(embed_dim, native_resolution, generator=g),
        text=ToyTextEncoder(embed_dim, generator=g),
    )


def clip_distance(encoder, render_hwc: Tensor, reference_hwc: Tensor) -> float:
    """One minus embedding similarity between two (H, W, 3) images in [0, 1].

    ``encoder`` is anything with ``embed_image`` over (3, H, W) inputs; for
    reported metrics it must differ from the encoder used during training.
    """
    with torch.no_grad():
        za = encoder.embed_image(render_hwc.permute(2, 0, 1))
        zb = encoder.embed_image(reference_hwc.permute(2, 0, 1))
    return float(1.0 - similarity(za, zb).item())


def train_contrastive(
    pair: EncoderPair,
    images: Tensor,
    prompts: list[str],
    steps: int = 600,
    batch_size: int = 16,
    lr: float = 2e-3,
    temperature: float = 0.1,
    generator: torch.Generator | None = None,
) -> list[float]:
    """Symmetric cross-entropy fit of the toy pair on (N, 3, H, W) + prompts.

    Batches are drawn so prompts within a batch are unique; logits are the
    scaled inner products of normalized image and text embeddings.
    """
    unique_prompts = sorted(set(prompts))
    by_prompt = {p: [i for i, q in enumerate(prompts) if q == p] for p in unique_prompts}
    params = list(pair.image.parameters()) + list(pair.text.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    history = []
    for _ in range(steps):
        k = min(batch_size, len(unique_prompts))
        chosen = torch.randperm(len(unique_prompts), generator=generator)[:k]
        batch_prompts = [unique_prompts[i] for i in chosen]
        idx = [
            by_prompt[p][int(torch.randint(0, len(by_prompt[p]), (1,), generator=generator))]
            for p in batch_prompts
        ]
        img_z = pair.image(images[idx])
        txt_z = normalize_embedding(torch.stack([pair.text(p) for p in batch_prompts]))
        logits = img_z @ txt_z.T / temperature
        labels = torch.arange(k)
        loss = 0.5 * (
            torch.nn.functional.cross_entropy(logits, labels)
            + torch.nn.functional.cross_entropy(logits.T, labels)
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history
