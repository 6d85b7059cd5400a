"""Pinned image preprocessing shared by every module.

Member/non-member distances are sensitive to preprocessing, so the exact
resize + per-channel affine normalization is fixed in one place and
recorded in checkpoint manifests. All resampling in the toolkit (input
preprocessing and generator-output resizing) uses the same bilinear kernel.
"""

from dataclasses import dataclass, asdict
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import PreprocessError


@dataclass(frozen=True)
class PreprocessConfig:
    image_size: int = 32
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.5, 0.5, 0.5)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d) -> "PreprocessConfig":
        return PreprocessConfig(int(d["image_size"]), tuple(d["mean"]), tuple(d["std"]))


def resize_images(batch: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of an NCHW float batch; identity if already sized."""
    if batch.shape[-2:] == (size, size):
        return batch
    return F.interpolate(batch, size=(size, size), mode="bilinear", align_corners=False)


def to_model_input(images, cfg: PreprocessConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Convert images to the normalized NCHW tensor the backbone consumes.

    Accepts uint8 HWC arrays (single image or batch) or an NCHW float
    tensor already scaled to [0, 1] (the generator output convention).
    """
    if isinstance(images, np.ndarray):
        if images.dtype != np.uint8:
            raise PreprocessError(f"numpy input must be uint8 HWC, got dtype {images.dtype}")
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[-1] != 3:
            raise PreprocessError(f"expected (N,H,W,3) uint8 images, got shape {images.shape}")
        batch = torch.from_numpy(np.ascontiguousarray(images)).to(dtype) / 255.0
        batch = batch.permute(0, 3, 1, 2)
    elif isinstance(images, torch.Tensor):
        batch = images.to(dtype) if images.dtype != dtype else images
        if batch.dim() == 3:
            batch = batch[None]
        if batch.dim() != 4 or batch.shape[1] != 3:
            raise PreprocessError(f"expected (N,3,H,W) tensor in [0,1], got shape {tuple(batch.shape)}")
    else:
        raise PreprocessError(f"unsupported image container: {type(images)}")

    batch = resize_images(batch, cfg.image_size)
    mean = torch.tensor(cfg.mean, dtype=batch.dtype).view(1, 3, 1, 1)
    std = torch.tensor(cfg.std, dtype=batch.dtype).view(1, 3, 1, 1)
    return (batch - mean) / std


def hflip(batch: torch.Tensor) -> torch.Tensor:
    """Horizontal flip along the width axis (last dimension)."""
    return torch.flip(batch, dims=[-1])
