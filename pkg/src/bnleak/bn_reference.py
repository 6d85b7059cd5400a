"""BN running statistics extraction and pre-BN activation capture.

The references are always the inference-mode running aggregates stored in
the checkpoint, never statistics recomputed from a batch. Activation taps
are read-only forward pre-hooks on the selected BN modules; they cannot
alter the forward computation.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import arrayio
from .errors import SelectionError
from .preprocess import to_model_input
from .target_zoo import CheckpointBundle


@dataclass(frozen=True)
class BNLayerRef:
    """Running statistics of one BN layer, snapshotted from a checkpoint."""

    layer_id: str
    kind: str  # "2d" or "1d"
    channels: int
    running_mean: np.ndarray
    running_var: np.ndarray

    def __post_init__(self):
        if self.running_mean.shape != (self.channels,) or self.running_var.shape != (self.channels,):
            raise ValueError(f"{self.layer_id}: statistics length must equal channel count")
        if np.any(self.running_var < 0):
            raise ValueError(f"{self.layer_id}: running_var must be nonnegative")


class BNReferenceSet:
    """Ordered collection of BNLayerRef, one per selected layer."""

    def __init__(self, layers: Sequence[BNLayerRef]):
        if len(layers) < 1:
            raise ValueError("reference set must contain at least one layer")
        ids = [l.layer_id for l in layers]
        if len(set(ids)) != len(ids):
            raise ValueError("layer ids must be unique")
        self.layers: List[BNLayerRef] = list(layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i: int) -> BNLayerRef:
        return self.layers[i]

    @property
    def layer_ids(self) -> List[str]:
        return [l.layer_id for l in self.layers]

    def layer(self, layer_id: str) -> BNLayerRef:
        for l in self.layers:
            if l.layer_id == layer_id:
                return l
        raise SelectionError(f"no reference for layer {layer_id!r}")

    def save(self, path: str) -> str:
        arrays = {}
        for l in self.layers:
            arrays[f"{l.layer_id}.running_mean"] = l.running_mean
            arrays[f"{l.layer_id}.running_var"] = l.running_var
        manifest = {
            "kind": "bn_reference_set",
            "layers": [{"layer_id": l.layer_id, "bn_kind": l.kind, "channels": l.channels} for l in self.layers],
        }
        return arrayio.save_named_arrays(path, arrays, manifest)

    @staticmethod
    def load(path: str) -> "BNReferenceSet":
        arrays, manifest = arrayio.load_named_arrays(path)
        layers = [
            BNLayerRef(
                layer_id=entry["layer_id"],
                kind=entry["bn_kind"],
                channels=int(entry["channels"]),
                running_mean=arrays[f"{entry['layer_id']}.running_mean"],
                running_var=arrays[f"{entry['layer_id']}.running_var"],
            )
            for entry in manifest["layers"]
        ]
        return BNReferenceSet(layers)


class ActivationSet:
    """Pre-BN activations captured for one forward pass, keyed by layer_id."""

    def __init__(self, activations: Dict[str, np.ndarray], order: Sequence[str]):
        if set(activations) != set(order):
            raise ValueError("activation keys must exactly match the selection")
        batches = {a.shape[0] for a in activations.values()}
        if len(batches) > 1:
            raise ValueError("inconsistent batch dimensions across layers")
        self._data = dict(activations)
        self.order = list(order)

    def __getitem__(self, layer_id: str) -> np.ndarray:
        return self._data[layer_id]

    def __len__(self) -> int:
        return len(self.order)

    def items(self):
        return [(lid, self._data[lid]) for lid in self.order]

    def save(self, path: str) -> str:
        manifest = {"kind": "activation_set", "order": self.order}
        return arrayio.save_named_arrays(path, self._data, manifest)


def _validate_selection(bundle: CheckpointBundle, selection: Optional[Sequence[str]]) -> List[str]:
    catalog = [layer_id for layer_id, _, _ in bundle.bn_layer_catalog()]
    if selection is None:
        return catalog
    unknown = [s for s in selection if s not in catalog]
    if unknown:
        raise SelectionError(f"unknown BN layer ids: {unknown}; catalog is {catalog}")
    return list(selection)


def extract_bn_references(bundle: CheckpointBundle, selection: Optional[Sequence[str]] = None) -> BNReferenceSet:
    """Snapshot running mean/var of the selected BN layers, in selection order.

    Defaults to the full catalog: input BN, the last BN of each of the 4
    sub-blocks, and the output-layer 2d + 1d BNs.
    """
    selection = _validate_selection(bundle, selection)
    kinds = {layer_id: (kind, ch) for layer_id, kind, ch in bundle.bn_layer_catalog()}
    layers = []
    for layer_id in selection:
        module = bundle.backbone.bn_module(layer_id)
        kind, channels = kinds[layer_id]
        layers.append(
            BNLayerRef(
                layer_id=layer_id,
                kind=kind,
                channels=channels,
                running_mean=module.running_mean.detach().numpy().copy(),
                running_var=module.running_var.detach().numpy().copy(),
            )
        )
    return BNReferenceSet(layers)


def forward_with_taps(
    bundle: CheckpointBundle, batch: torch.Tensor, selection: Sequence[str]
) -> Dict[str, torch.Tensor]:
    """Differentiable forward pass returning the inputs of each selected BN.

    The taps keep the autograd graph alive, so gradients can flow from any
    captured activation back to the input batch. The bundle's modules are
    left untouched (hooks are removed before returning).
    """
    captured: Dict[str, torch.Tensor] = {}
    handles = []

    def make_hook(layer_id):
        def hook(module, inputs):
            captured[layer_id] = inputs[0]
            return None

        return hook

    bundle.backbone.eval()
    try:
        for layer_id in selection:
            handles.append(bundle.backbone.bn_module(layer_id).register_forward_pre_hook(make_hook(layer_id)))
        bundle.backbone(batch)
    finally:
        for h in handles:
            h.remove()
    return captured


def capture_pre_bn_activations(
    bundle: CheckpointBundle, images, selection: Optional[Sequence[str]] = None
) -> ActivationSet:
    """Capture the pre-BN inputs of the selected layers for one forward pass."""
    selection = _validate_selection(bundle, selection)
    with torch.no_grad():
        batch = to_model_input(images, bundle.preprocess)
        captured = forward_with_taps(bundle, batch, selection)
    return ActivationSet({lid: t.numpy().copy() for lid, t in captured.items()}, order=selection)
