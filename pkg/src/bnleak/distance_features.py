"""Distances between reduced activations and BN running statistics.

For a selected layer with b channels, the base distance between the
channel-reduced activation r and the stored reference u is

    (1/b) * ||r - u||^2

and the flip-fused form replaces r with the average of the reductions of
an image and its horizontal mirror. Mean distances exist for every layer;
variance distances only for 2d layers, because the stored variance of the
1d output layer aggregates over the batch dimension and is not comparable
to a per-sample spatial variance.

All operations accept numpy arrays or torch tensors; the torch path keeps
the autograd graph intact, which latent-space optimization relies on.
"""

import csv
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .bn_reference import BNReferenceSet, forward_with_taps
from .errors import DimensionError, SelectionError, VarianceUndefinedError
from .preprocess import hflip, to_model_input
from .target_zoo import CheckpointBundle

VARIANT_NAMES = ("mean", "var", "mean_and_var", "mean_and_flip", "mean_and_var_and_flip")

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class VariantSpec:
    """Which statistics feed the attack model, and from which layers."""

    variant: str = "mean_and_flip"
    selection: Optional[Tuple[str, ...]] = None  # None = full catalog

    def __post_init__(self):
        if self.variant not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANT_NAMES}")

    @property
    def uses_mean(self) -> bool:
        return self.variant != "var"

    @property
    def uses_var(self) -> bool:
        return "var" in self.variant

    @property
    def uses_flip(self) -> bool:
        return "flip" in self.variant

    def layout(self, refs: BNReferenceSet) -> List[Tuple[str, str]]:
        """Feature layout: all mean entries in layer order, then all var entries."""
        entries: List[Tuple[str, str]] = []
        if self.uses_mean:
            entries += [(l.layer_id, "mean") for l in refs]
        if self.uses_var:
            entries += [(l.layer_id, "var") for l in refs if l.kind == "2d"]
        if not entries:
            raise SelectionError(f"variant {self.variant!r} yields no features for this selection")
        return entries

    def to_dict(self):
        return {"variant": self.variant, "selection": list(self.selection) if self.selection else None}

    @staticmethod
    def from_dict(d) -> "VariantSpec":
        sel = d.get("selection")
        return VariantSpec(d["variant"], tuple(sel) if sel else None)


@dataclass
class DistanceVector:
    """Per-layer distance features for one image, in layout order."""

    values: ArrayLike
    layout: List[Tuple[str, str]]

    def __post_init__(self):
        n = self.values.shape[-1]
        if n != len(self.layout):
            raise DimensionError(f"{n} values for {len(self.layout)} layout entries")
        vals = self.numpy()
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("distance entries must be finite and nonnegative")

    def numpy(self) -> np.ndarray:
        if isinstance(self.values, torch.Tensor):
            return self.values.detach().numpy()
        return np.asarray(self.values)

    def __len__(self) -> int:
        return len(self.layout)


def _is_torch(*arrays) -> bool:
    return any(isinstance(a, torch.Tensor) for a in arrays)


def reduce_channel_mean(activation: ArrayLike) -> ArrayLike:
    """Per-channel spatial mean; identity for activations with no spatial dims.

    Accepts (c,h,w) or batched (b,c,h,w); 1d activations (c,) or (b,c)
    pass through unchanged.
    """
    if activation.ndim in (1, 2):
        return activation
    if activation.ndim in (3, 4):
        if activation.shape[-1] == 0 or activation.shape[-2] == 0:
            raise DimensionError("activation has empty spatial dimensions")
        if isinstance(activation, torch.Tensor):
            return activation.mean(dim=(-2, -1))
        return np.asarray(activation).mean(axis=(-2, -1))
    raise DimensionError(f"unsupported activation rank {activation.ndim}")


def reduce_channel_var(activation: ArrayLike) -> ArrayLike:
    """Per-channel spatial population variance (divisor h*w); 2d layers only."""
    if activation.ndim in (1, 2):
        raise VarianceUndefinedError("spatial variance is undefined for 1d activations")
    if activation.ndim in (3, 4):
        if activation.shape[-1] == 0 or activation.shape[-2] == 0:
            raise DimensionError("activation has empty spatial dimensions")
        if isinstance(activation, torch.Tensor):
            return activation.var(dim=(-2, -1), unbiased=False)
        return np.asarray(activation).var(axis=(-2, -1))
    raise DimensionError(f"unsupported activation rank {activation.ndim}")


def squared_channel_distance(reduced: ArrayLike, reference: ArrayLike) -> ArrayLike:
    """Squared Euclidean distance between reduction and reference, over channels.

    The result is scaled by 1/b where b is the channel count. `reduced`
    may be a single vector (b,) or a batch (n, b).
    """
    b = reference.shape[-1]
    if reduced.shape[-1] != b:
        raise DimensionError(f"length mismatch: reduced {reduced.shape[-1]} vs reference {b}")
    if _is_torch(reduced, reference):
        reduced = torch.as_tensor(reduced)
        reference = torch.as_tensor(reference, dtype=reduced.dtype)
        return ((reduced - reference) ** 2).sum(dim=-1) / b
    return np.sum((np.asarray(reduced) - np.asarray(reference)) ** 2, axis=-1) / b


def flip_averaged_distance(reduced: ArrayLike, reduced_flipped: ArrayLike, reference: ArrayLike) -> ArrayLike:
    """Distance of the average of the plain and mirrored reductions to the reference."""
    if reduced.shape != reduced_flipped.shape:
        raise DimensionError("reduced and reduced_flipped must have identical shapes")
    fused = (reduced + reduced_flipped) / 2
    return squared_channel_distance(fused, reference)


def _resolve_layers(refs: BNReferenceSet, variant: VariantSpec) -> List[str]:
    if variant.selection is not None and list(variant.selection) != refs.layer_ids:
        raise SelectionError(
            f"variant selection {list(variant.selection)} does not match reference set {refs.layer_ids}"
        )
    return refs.layer_ids


def distance_matrix(
    bundle: CheckpointBundle, refs: BNReferenceSet, images, variant: VariantSpec
) -> torch.Tensor:
    """Distance features for a batch of images, shape (n_images, n_features).

    Differentiable with respect to a float tensor input. Flip variants run
    a second forward pass on the horizontally mirrored batch and fuse the
    channel reductions before the distance.
    """
    layer_ids = _resolve_layers(refs, variant)
    batch = to_model_input(images, bundle.preprocess, dtype=_input_dtype(images))
    acts = forward_with_taps(bundle, batch, layer_ids)
    acts_flipped = forward_with_taps(bundle, hflip(batch), layer_ids) if variant.uses_flip else None

    columns: List[torch.Tensor] = []
    if variant.uses_mean:
        for ref in refs:
            u = torch.as_tensor(ref.running_mean, dtype=batch.dtype)
            r = reduce_channel_mean(acts[ref.layer_id])
            if variant.uses_flip:
                columns.append(flip_averaged_distance(r, reduce_channel_mean(acts_flipped[ref.layer_id]), u))
            else:
                columns.append(squared_channel_distance(r, u))
    if variant.uses_var:
        for ref in refs:
            if ref.kind != "2d":
                continue
            u = torch.as_tensor(ref.running_var, dtype=batch.dtype)
            r = reduce_channel_var(acts[ref.layer_id])
            if variant.uses_flip:
                columns.append(flip_averaged_distance(r, reduce_channel_var(acts_flipped[ref.layer_id]), u))
            else:
                columns.append(squared_channel_distance(r, u))
    if not columns:
        raise SelectionError(f"variant {variant.variant!r} yields no features for this selection")
    return torch.stack(columns, dim=1)


def _input_dtype(images) -> torch.dtype:
    if isinstance(images, torch.Tensor) and images.is_floating_point():
        return images.dtype
    return torch.float32


def build_distance_vector(
    bundle: CheckpointBundle, refs: BNReferenceSet, image, variant: VariantSpec
) -> DistanceVector:
    """Distance features of a single image, with the variant-defined layout."""
    if isinstance(image, np.ndarray) and image.ndim == 3:
        image = image[None]
    elif isinstance(image, torch.Tensor) and image.dim() == 3:
        image = image[None]
    matrix = distance_matrix(bundle, refs, image, variant)
    return DistanceVector(values=matrix[0], layout=variant.layout(refs))


def distance_rows(
    sample_ids: Sequence[str], labels: Sequence[int], matrix: np.ndarray, layout: Sequence[Tuple[str, str]]
) -> List[Tuple[str, int, str, str, float]]:
    """Flatten a distance matrix into (sample_id, label, layer_id, statistic, distance) rows."""
    if matrix.shape != (len(sample_ids), len(layout)):
        raise DimensionError(f"matrix shape {matrix.shape} does not match ids x layout")
    rows = []
    for i, sid in enumerate(sample_ids):
        for j, (layer_id, stat) in enumerate(layout):
            rows.append((sid, int(labels[i]), layer_id, stat, float(matrix[i, j])))
    return rows


def write_distance_csv(path: str, rows: Sequence[Tuple[str, int, str, str, float]]) -> None:
    """Plot-data export backing the member/non-member distance histograms."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label", "layer_id", "statistic", "distance"])
        writer.writerows(rows)
