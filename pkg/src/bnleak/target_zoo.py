"""Embedding backbones with margin-based training heads.

The backbone is a small squeeze-excitation residual net whose BN layout
matches the layer catalog the distance features rely on: one BN in the
input stem, the final BN of each of the four sub-blocks, and a
BatchNorm2d + BatchNorm1d pair in the output layer. The classification
head exists only for training and evaluation; inference-time consumers see
embeddings alone.
"""

import copy
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import arrayio
from .errors import DatasetError, HeadMissingError, TrainingDivergedError
from .preprocess import PreprocessConfig, hflip, to_model_input
from .toyfaces import ImageSet

BN_KIND_2D = "2d"
BN_KIND_1D = "1d"


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture hyperparameters of the embedding net."""

    architecture_id: str = "se_resnet_toy"
    depth: int = 1  # residual units per sub-block
    widths: Tuple[int, int, int, int] = (16, 32, 64, 128)
    embedding_dim: int = 64
    input_shape: Tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        if self.architecture_id != "se_resnet_toy":
            raise ValueError(f"unknown architecture_id {self.architecture_id!r}")
        if self.depth < 1 or self.embedding_dim < 1:
            raise ValueError("depth and embedding_dim must be positive")
        c, h, w = self.input_shape
        if c != 3 or h % 16 != 0 or w % 16 != 0:
            raise ValueError("input_shape must be (3, 16k, 16k)")

    def bn_layer_catalog(self) -> List[Tuple[str, str, int]]:
        """Selectable BN layers as (layer_id, kind, channels), forward order."""
        cat = [("input_bn", BN_KIND_2D, self.widths[0])]
        cat += [(f"block{i + 1}_bn", BN_KIND_2D, self.widths[i]) for i in range(4)]
        cat.append(("output_bn2d", BN_KIND_2D, self.widths[3]))
        cat.append(("output_bn1d", BN_KIND_1D, self.embedding_dim))
        return cat

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d) -> "BackboneSpec":
        return BackboneSpec(
            architecture_id=d["architecture_id"],
            depth=int(d["depth"]),
            widths=tuple(d["widths"]),
            embedding_dim=int(d["embedding_dim"]),
            input_shape=tuple(d["input_shape"]),
        )


@dataclass(frozen=True)
class HeadSpec:
    """Classification head used during training (and evaluation only after)."""

    head_id: str = "arcface-margin"
    num_classes: int = 2
    margin: float = 0.5
    scale: float = 16.0

    def __post_init__(self):
        if self.head_id not in ("arcface-margin", "cosface-margin", "plain-softmax"):
            raise ValueError(f"unknown head_id {self.head_id!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d) -> "HeadSpec":
        return HeadSpec(d["head_id"], int(d["num_classes"]), float(d["margin"]), float(d["scale"]))


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[:, :, None, None]


class ResidualUnit(nn.Module):
    """BN -> conv -> BN -> PReLU -> conv -> BN -> SE, plus a projected shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.bn_in = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn_mid = nn.BatchNorm2d(out_ch)
        self.act = nn.PReLU(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn_out = nn.BatchNorm2d(out_ch)
        self.se = SqueezeExcite(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.bn_in(x)
        out = self.conv1(out)
        out = self.act(self.bn_mid(out))
        out = self.conv2(out)
        out = self.bn_out(out)
        out = self.se(out)
        return out + self.shortcut(x)


class SEResNetBackbone(nn.Module):
    """Toy squeeze-excitation residual embedding net."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.stem_conv = nn.Conv2d(3, w[0], 3, padding=1, bias=False)
        self.input_bn = nn.BatchNorm2d(w[0])
        self.stem_act = nn.PReLU(w[0])
        stages = []
        in_ch = w[0]
        for out_ch in w:
            units = [ResidualUnit(in_ch, out_ch, stride=2)]
            units += [ResidualUnit(out_ch, out_ch, stride=1) for _ in range(spec.depth - 1)]
            stages.append(nn.Sequential(*units))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        side = spec.input_shape[1] // 16
        self.output_bn2d = nn.BatchNorm2d(w[3])
        self.fc = nn.Linear(w[3] * side * side, spec.embedding_dim)
        self.output_bn1d = nn.BatchNorm1d(spec.embedding_dim)

    def bn_module(self, layer_id: str) -> nn.Module:
        """Resolve a catalog layer_id to its BN module."""
        if layer_id == "input_bn":
            return self.input_bn
        if layer_id == "output_bn2d":
            return self.output_bn2d
        if layer_id == "output_bn1d":
            return self.output_bn1d
        for i in range(4):
            if layer_id == f"block{i + 1}_bn":
                return self.stages[i][-1].bn_out
        raise KeyError(layer_id)

    def forward(self, x):
        out = self.stem_act(self.input_bn(self.stem_conv(x)))
        for stage in self.stages:
            out = stage(out)
        out = self.output_bn2d(out)
        out = out.flatten(1)
        out = self.fc(out)
        return self.output_bn1d(out)


class MarginHead(nn.Module):
    """Normalized-linear head with an additive angular or cosine margin."""

    def __init__(self, spec: HeadSpec, embedding_dim: int):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.num_classes, embedding_dim))
        nn.init.xavier_uniform_(self.weight)
        m = spec.margin
        self.cos_m, self.sin_m = math.cos(m), math.sin(m)
        self.th = math.cos(math.pi - m)
        self.mm = math.sin(math.pi - m) * m

    def eval_scores(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Margin-free cosine scores, the evaluation-time classification."""
        return F.linear(F.normalize(embeddings), F.normalize(self.weight))

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cosine = self.eval_scores(embeddings)
        if self.spec.head_id == "cosface-margin":
            phi = cosine - self.spec.margin
        else:
            sine = torch.sqrt(torch.clamp(1.0 - cosine**2, min=1e-7))
            phi = cosine * self.cos_m - sine * self.sin_m
            phi = torch.where(cosine > self.th, phi, cosine - self.mm)
        one_hot = F.one_hot(labels, self.spec.num_classes).to(cosine.dtype)
        return self.spec.scale * (one_hot * phi + (1.0 - one_hot) * cosine)


class SoftmaxHead(nn.Module):
    def __init__(self, spec: HeadSpec, embedding_dim: int):
        super().__init__()
        self.spec = spec
        self.linear = nn.Linear(embedding_dim, spec.num_classes)

    def eval_scores(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.linear(embeddings)

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.eval_scores(embeddings)


def build_head(spec: HeadSpec, embedding_dim: int) -> nn.Module:
    if spec.head_id == "plain-softmax":
        return SoftmaxHead(spec, embedding_dim)
    return MarginHead(spec, embedding_dim)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: Tuple[int, ...] = (15, 25)
    lr_gamma: float = 0.1
    batch_size: int = 64
    seed: int = 0
    flip_augmentation: bool = False
    holdout_fraction: float = 0.1

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d) -> "TrainConfig":
        d = dict(d)
        d["lr_steps"] = tuple(d.get("lr_steps", ()))
        return TrainConfig(**d)


@dataclass
class CheckpointBundle:
    """A trained backbone + head snapshot with its selection bookkeeping.

    Immutable by convention after creation; modules are kept in eval mode
    and shared freely. member_ids lists exactly the images the selected
    checkpoint was trained on (the membership ground truth).
    """

    backbone: SEResNetBackbone
    head: Optional[nn.Module]
    backbone_spec: BackboneSpec
    head_spec: Optional[HeadSpec]
    train_cfg: TrainConfig
    preprocess: PreprocessConfig
    best_epoch: int
    train_accuracy: List[float]
    test_accuracy: List[float]
    member_ids: List[str]
    holdout_ids: List[str]
    class_to_identity: List[int]

    def __post_init__(self):
        epochs = self.train_cfg.epochs
        if len(self.train_accuracy) != epochs or len(self.test_accuracy) != epochs:
            raise ValueError("accuracy history length must equal trained epochs")
        if epochs > 0 and self.test_accuracy[self.best_epoch] != max(self.test_accuracy):
            raise ValueError("selected checkpoint must have the best test accuracy")
        self.backbone.eval()
        if self.head is not None:
            self.head.eval()

    @property
    def flip_augmented_training(self) -> bool:
        return self.train_cfg.flip_augmentation

    def bn_layer_catalog(self) -> List[Tuple[str, str, int]]:
        return self.backbone_spec.bn_layer_catalog()

    def without_head(self) -> "CheckpointBundle":
        clone = copy.copy(self)
        clone.head = None
        clone.head_spec = None
        return clone

    def save(self, path: str) -> str:
        arrays = {f"backbone.{k}": v.detach().numpy() for k, v in self.backbone.state_dict().items()}
        if self.head is not None:
            arrays.update({f"head.{k}": v.detach().numpy() for k, v in self.head.state_dict().items()})
        arrays["train_accuracy"] = np.asarray(self.train_accuracy, dtype=np.float64)
        arrays["test_accuracy"] = np.asarray(self.test_accuracy, dtype=np.float64)
        manifest = {
            "kind": "checkpoint",
            "backbone_spec": self.backbone_spec.to_dict(),
            "head_spec": self.head_spec.to_dict() if self.head_spec else None,
            "train_cfg": self.train_cfg.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "best_epoch": self.best_epoch,
            "member_ids": list(self.member_ids),
            "holdout_ids": list(self.holdout_ids),
            "class_to_identity": [int(c) for c in self.class_to_identity],
        }
        return arrayio.save_named_arrays(path, arrays, manifest)

    @staticmethod
    def load(path: str) -> "CheckpointBundle":
        arrays, manifest = arrayio.load_named_arrays(path)
        backbone_spec = BackboneSpec.from_dict(manifest["backbone_spec"])
        backbone = SEResNetBackbone(backbone_spec)
        backbone.load_state_dict(
            {k[len("backbone.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("backbone.")}
        )
        head = None
        head_spec = None
        if manifest["head_spec"] is not None:
            head_spec = HeadSpec.from_dict(manifest["head_spec"])
            head = build_head(head_spec, backbone_spec.embedding_dim)
            head.load_state_dict(
                {k[len("head.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("head.")}
            )
        return CheckpointBundle(
            backbone=backbone,
            head=head,
            backbone_spec=backbone_spec,
            head_spec=head_spec,
            train_cfg=TrainConfig.from_dict(manifest["train_cfg"]),
            preprocess=PreprocessConfig.from_dict(manifest["preprocess"]),
            best_epoch=int(manifest["best_epoch"]),
            train_accuracy=arrays["train_accuracy"].tolist(),
            test_accuracy=arrays["test_accuracy"].tolist(),
            member_ids=list(manifest["member_ids"]),
            holdout_ids=list(manifest["holdout_ids"]),
            class_to_identity=list(manifest["class_to_identity"]),
        )


def _stratified_holdout(
    labels: np.ndarray, groups: np.ndarray, fraction: float, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class holdout indices, holding out whole groups.

    Images sharing a group id are takes of the same scene; splitting them
    across train/holdout would leak the held-out content.
    """
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = [], []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        uniq_groups = np.unique(groups[idx])
        uniq_groups = uniq_groups[rng.permutation(len(uniq_groups))]
        target = max(1, int(round(fraction * len(idx))))
        held_groups, held = [], 0
        for grp in uniq_groups:
            if held >= target:
                break
            held_groups.append(grp)
            held += int(np.sum(groups[idx] == grp))
        mask = np.isin(groups[idx], held_groups)
        hold_idx.append(idx[mask])
        train_idx.append(idx[~mask])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(hold_idx))


def _accuracy(scores: torch.Tensor, labels: torch.Tensor) -> float:
    return float((scores.argmax(dim=1) == labels).double().mean())


def train_target_backbone(
    dataset: ImageSet,
    spec: BackboneSpec,
    head_spec: HeadSpec,
    train_cfg: TrainConfig,
    preprocess: Optional[PreprocessConfig] = None,
    eval_dataset: Optional[ImageSet] = None,
) -> CheckpointBundle:
    """Train backbone + head and return the best-held-out-accuracy epoch.

    When no explicit eval_dataset is given, a per-class fraction of the
    input is held out for checkpoint selection and excluded from the
    member set. Ties in held-out accuracy keep the earliest epoch.
    """
    preprocess = preprocess or PreprocessConfig(image_size=spec.input_shape[1])
    labels_all = dataset.class_labels()
    n_classes = int(labels_all.max()) + 1 if len(labels_all) else 0
    if dataset.num_identities() < 2:
        raise DatasetError("training dataset must contain at least 2 identities")
    if head_spec.num_classes != n_classes:
        raise DatasetError(f"head expects {head_spec.num_classes} classes, dataset has {n_classes}")

    if eval_dataset is None:
        train_idx, hold_idx = _stratified_holdout(labels_all, dataset.groups, train_cfg.holdout_fraction, train_cfg.seed)
        train_ids = [dataset.ids[i] for i in train_idx]
        holdout_ids = [dataset.ids[i] for i in hold_idx]
        x_train_raw, y_train = dataset.images[train_idx], labels_all[train_idx]
        x_hold_raw, y_hold = dataset.images[hold_idx], labels_all[hold_idx]
    else:
        train_ids, holdout_ids = list(dataset.ids), list(eval_dataset.ids)
        x_train_raw, y_train = dataset.images, labels_all
        x_hold_raw, y_hold = eval_dataset.images, eval_dataset.class_labels()

    torch.manual_seed(train_cfg.seed)
    backbone = SEResNetBackbone(spec)
    head = build_head(head_spec, spec.embedding_dim)
    params = list(backbone.parameters()) + list(head.parameters())
    optimizer = torch.optim.SGD(
        params, lr=train_cfg.lr, momentum=train_cfg.momentum, weight_decay=train_cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(train_cfg.lr_steps), gamma=train_cfg.lr_gamma
    )

    x_train = to_model_input(x_train_raw, preprocess)
    y_train_t = torch.from_numpy(y_train)
    x_hold = to_model_input(x_hold_raw, preprocess)
    y_hold_t = torch.from_numpy(np.asarray(y_hold))

    g = torch.Generator().manual_seed(train_cfg.seed)
    n = len(x_train)
    train_hist: List[float] = []
    test_hist: List[float] = []
    best_epoch, best_acc = 0, -1.0
    best_state = (copy.deepcopy(backbone.state_dict()), copy.deepcopy(head.state_dict()))

    for epoch in range(train_cfg.epochs):
        backbone.train()
        head.train()
        perm = torch.randperm(n, generator=g)
        correct = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            xb, yb = x_train[idx], y_train_t[idx]
            if train_cfg.flip_augmentation:
                mask = torch.rand(len(idx), generator=g) < 0.5
                xb = torch.where(mask[:, None, None, None], hflip(xb), xb)
            logits = head(backbone(xb), yb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            correct += int((logits.argmax(dim=1) == yb).sum())
        scheduler.step()
        train_hist.append(correct / n)

        backbone.eval()
        head.eval()
        with torch.no_grad():
            test_acc = _accuracy(head.eval_scores(backbone(x_hold)), y_hold_t)
        test_hist.append(test_acc)
        if test_acc > best_acc:
            best_acc = test_acc
            best_epoch = epoch
            best_state = (copy.deepcopy(backbone.state_dict()), copy.deepcopy(head.state_dict()))

    backbone.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    uniq = np.unique(dataset.identities)
    return CheckpointBundle(
        backbone=backbone,
        head=head,
        backbone_spec=spec,
        head_spec=head_spec,
        train_cfg=train_cfg,
        preprocess=preprocess,
        best_epoch=best_epoch,
        train_accuracy=train_hist,
        test_accuracy=test_hist,
        member_ids=train_ids,
        holdout_ids=holdout_ids,
        class_to_identity=[int(p) for p in uniq],
    )


def embed(bundle: CheckpointBundle, images) -> np.ndarray:
    """Embeddings of a batch, one row per input image. Head is never touched."""
    bundle.backbone.eval()
    with torch.no_grad():
        x = to_model_input(images, bundle.preprocess)
        out = bundle.backbone(x)
    result = out.numpy()
    if not np.all(np.isfinite(result)):
        raise TrainingDivergedError("backbone produced non-finite embeddings")
    return result


def embed_tensor(bundle: CheckpointBundle, batch: torch.Tensor) -> torch.Tensor:
    """Differentiable embedding of an already-preprocessed NCHW batch."""
    bundle.backbone.eval()
    return bundle.backbone(batch)


def classify_eval_only(bundle: CheckpointBundle, embeddings: np.ndarray) -> np.ndarray:
    """Per-class scores from the retained head; evaluation use only."""
    if bundle.head is None:
        raise HeadMissingError("bundle does not retain a classification head")
    bundle.head.eval()
    with torch.no_grad():
        scores = bundle.head.eval_scores(torch.as_tensor(np.asarray(embeddings), dtype=torch.float32))
    return scores.numpy()
