"""Small shared image helpers: layout changes, fixed bilinear resize, PSNR."""

from __future__ import annotations

import torch
from torch import Tensor
import torch.nn.functional as F


def hwc_to_chw(img: Tensor) -> Tensor:
    return img.permute(2, 0, 1)


def chw_to_hwc(img: Tensor) -> Tensor:
    return img.permute(1, 2, 0)


def resize_chw(img: Tensor, size: int | tuple[int, int]) -> Tensor:
    """Fixed bilinear resize of a (C, H, W) or (B, C, H, W) image.

    The interpolation mode is part of the differentiated path, so it is
    pinned here (bilinear, align_corners=False, no antialiasing) and reused
    everywhere an image changes resolution.
    """
    if isinstance(size, int):
        size = (size, size)
    batched = img.dim() == 4
    if not batched:
        img = img[None]
    if img.shape[-2:] != size:
        img = F.interpolate(img, size=size, mode="bilinear", align_corners=False)
    return img if batched else img[0]


def to_signed(img01: Tensor) -> Tensor:
    """Map [0, 1] image values to the [-1, 1] range denoisers consume."""
    return img01 * 2.0 - 1.0


def to_unit(img_signed: Tensor) -> Tensor:
    return (img_signed + 1.0) * 0.5


def psnr(a: Tensor, b: Tensor, mask: Tensor | None = None) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    With a boolean ``mask`` (H, W), the mean squared error is restricted to
    the masked pixels.
    """
    se = (a - b) ** 2
    if mask is not None:
        se = se[mask]
    mse = se.mean().item()
    if mse <= 0:
        return float("inf")
    return -10.0 * torch.log10(torch.tensor(mse)).item()
