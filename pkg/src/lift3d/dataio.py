"""File formats: reference bundles, depth rasters, frames, checkpoints,
evaluation reports.

The depth raster is a little-endian binary file: 4-byte magic ``DPT1``,
uint32 width, uint32 height, uint32 reserved (0), then row-major float32
depths with larger meaning farther. 16-bit grayscale PNGs are accepted as
an alternative and mapped linearly to [0, 1]. Checkpoints and reports
round-trip byte-identically.
"""

from __future__ import annotations

import json
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

DEPTH_MAGIC = b"DPT1"
CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    """A file failed validation; the message carries path and reason."""


@dataclass
class ReferenceBundle:
    """The single training input: segmented photo, pseudo-depth, prompt.

    ``rgb`` is (H, W, 3) in [0, 1]; ``mask`` marks foreground;
    ``pseudo_depth`` is finite on the mask with larger values farther.
    ``background_valid`` says whether the off-mask pixels of ``rgb`` are
    meaningful (true for synthetic references, false for segmented photos
    whose background was removed).
    """

    rgb: torch.Tensor
    mask: torch.Tensor
    pseudo_depth: torch.Tensor
    prompt: str
    background_valid: bool = False

    def __post_init__(self):
        h, w = self.rgb.shape[:2]
        if self.rgb.shape != (h, w, 3):
            raise DataFormatError(f"rgb must be (H, W, 3), got {tuple(self.rgb.shape)}")
        if self.mask.shape != (h, w) or self.pseudo_depth.shape != (h, w):
            raise DataFormatError("mask and pseudo-depth must match the image size")
        if self.mask.any() and not torch.isfinite(self.pseudo_depth[self.mask]).all():
            raise DataFormatError("pseudo-depth must be finite on the foreground mask")


def write_depth_raster(path, depth: np.ndarray | torch.Tensor) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise DataFormatError(f"depth must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<III", w, h, 0))
        f.write(depth.astype("<f4").tobytes())


def read_depth_raster(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise DataFormatError(f"{path}: not a DPT1 depth raster")
    w, h, reserved = struct.unpack("<III", raw[4:16])
    if reserved != 0:
        raise DataFormatError(f"{path}: reserved header field must be 0, got {reserved}")
    expected = 16 + 4 * w * h
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for {w}x{h}, got {len(raw)}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w).copy()


def read_depth_png16(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype != np.uint16:
        raise DataFormatError(f"{path}: depth PNG must be 16-bit grayscale, got {arr.dtype}")
    return (arr.astype(np.float32) / 65535.0).copy()


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_depth_png16(path)
    return read_depth_raster(path)


def save_png(path, img01: torch.Tensor | np.ndarray) -> None:
    """Write an (H, W, 3) image in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(img01.detach().cpu() if isinstance(img01, torch.Tensor) else img01)
    arr = np.clip(arr * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def save_rgba_png(path, rgb01: torch.Tensor, mask: torch.Tensor) -> None:
    rgb = np.clip(np.asarray(rgb01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    alpha = np.where(np.asarray(mask), 255, 0).astype(np.uint8)
    Image.fromarray(np.dstack([rgb, alpha]), mode="RGBA").save(path)


def load_reference(rgb_path, depth_path, prompt: str, background_valid: bool = False) -> ReferenceBundle:
    """Decode an RGBA reference PNG plus a depth raster into a bundle.

    Alpha above 127 marks foreground. Shape mismatches, bad headers, and
    non-finite masked depth all fault with the offending path.
    """
    rgb_path = Path(rgb_path)
    try:
        img = Image.open(rgb_path)
    except Exception as err:
        raise DataFormatError(f"{rgb_path}: cannot decode image ({err})") from err
    rgba = np.asarray(img.convert("RGBA"), dtype=np.float32)
    rgb = torch.from_numpy(rgba[..., :3] / 255.0)
    mask = torch.from_numpy(rgba[..., 3] > 127.5)

    depth = torch.from_numpy(np.asarray(read_depth(depth_path), dtype=np.float32))
    if depth.shape != rgb.shape[:2]:
        raise DataFormatError(
            f"{depth_path}: depth size {tuple(depth.shape)} does not match "
            f"image size {tuple(rgb.shape[:2])}"
        )
    return ReferenceBundle(rgb=rgb, mask=mask, pseudo_depth=depth, prompt=prompt,
                           background_valid=background_valid)


@dataclass
class Checkpoint:
    """Serializable training state; round-trips bit-identically."""

    version: int = CHECKPOINT_VERSION
    step: int = 0
    field_state: dict = field(default_factory=dict)
    background_state: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)  # z / z_star / z_prime -> array
    config: dict = field(default_factory=dict)
    prior_path: str | None = None
    adapted_denoiser_state: dict | None = None


def _to_numpy_tree(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy()
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(v) for k, v in obj.items()}
    return obj


def state_dict_to_numpy(state: dict) -> dict:
    return _to_numpy_tree(dict(state))


def numpy_to_state_dict(state: dict) -> dict:
    return {k: torch.from_numpy(np.asarray(v)) for k, v in state.items()}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    payload = {
        "version": ckpt.version,
        "step": ckpt.step,
        "field_state": _to_numpy_tree(ckpt.field_state),
        "background_state": _to_numpy_tree(ckpt.background_state),
        "embeddings": _to_numpy_tree(ckpt.embeddings),
        "config": ckpt.config,
        "prior_path": ckpt.prior_path,
        "adapted_denoiser_state": _to_numpy_tree(ckpt.adapted_denoiser_state)
        if ckpt.adapted_denoiser_state is not None
        else None,
    }
    with open(path, "wb") as f:
        pickle.dump(payload, f, protocol=4)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return Checkpoint(**payload)


def write_report(path, report: dict) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def read_report(path) -> dict:
    with open(path) as f:
        return json.load(f)
