"""Stage 1: the membership classifier over distance features.

The attack model is a single linear layer plus sigmoid. Training performs
plain full-batch gradient descent on the paired loss

    CE[A(d_member), 1] + CE[A(d_nonmember), 0]

for a fixed number of iterations, evaluating held-out accuracy after every
update and returning the parameters of the best iteration (earliest on
ties). Distances to a fixed target are constant across iterations, so they
are computed once up front; the update rule is unchanged.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import arrayio
from .bn_reference import BNReferenceSet
from .distance_features import DistanceVector, VariantSpec, distance_matrix
from .errors import DatasetError, DimensionError, TrainingDivergedError
from .target_zoo import CheckpointBundle


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class LabeledDistanceSet:
    """Distance rows with binary membership labels (1 = member)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DimensionError("features must be 2d with one label per row")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise DatasetError("labels must be binary (0 or 1)")

    def require_both_classes(self):
        if len(np.unique(self.labels)) < 2:
            raise DatasetError("both member and non-member rows are required")
        return self


@dataclass
class AttackModel:
    """Linear + sigmoid membership classifier with training bookkeeping."""

    weights: np.ndarray
    bias: float
    variant: VariantSpec
    layout: List[Tuple[str, str]]
    seed: int
    best_accuracy: float
    best_iteration: int
    accuracy_trace: List[float] = field(default_factory=list)
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.layout),):
            raise DimensionError("weight length must equal the distance-vector layout length")

    @property
    def standardized(self) -> bool:
        return self.feature_mean is not None

    def _transform(self, features: np.ndarray) -> np.ndarray:
        if self.standardized:
            return (features - self.feature_mean) / self.feature_std
        return features

    def decision_values(self, features: np.ndarray) -> np.ndarray:
        return self._transform(np.asarray(features, dtype=np.float64)) @ self.weights + self.bias

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        return sigmoid(self.decision_values(features))

    def save(self, path: str) -> str:
        arrays = {"weights": self.weights, "bias": np.float64(self.bias).reshape(1)}
        arrays["accuracy_trace"] = np.asarray(self.accuracy_trace, dtype=np.float64)
        if self.standardized:
            arrays["feature_mean"] = self.feature_mean
            arrays["feature_std"] = self.feature_std
        manifest = {
            "kind": "attack_model",
            "variant": self.variant.to_dict(),
            "layout": [list(e) for e in self.layout],
            "seed": self.seed,
            "best_accuracy": self.best_accuracy,
            "best_iteration": self.best_iteration,
        }
        return arrayio.save_named_arrays(path, arrays, manifest)

    @staticmethod
    def load(path: str) -> "AttackModel":
        arrays, manifest = arrayio.load_named_arrays(path)
        return AttackModel(
            weights=arrays["weights"],
            bias=float(arrays["bias"][0]),
            variant=VariantSpec.from_dict(manifest["variant"]),
            layout=[tuple(e) for e in manifest["layout"]],
            seed=int(manifest["seed"]),
            best_accuracy=float(manifest["best_accuracy"]),
            best_iteration=int(manifest["best_iteration"]),
            accuracy_trace=arrays["accuracy_trace"].tolist(),
            feature_mean=arrays.get("feature_mean"),
            feature_std=arrays.get("feature_std"),
        )


def predict_membership(model: AttackModel, d) -> float:
    """Membership probability for one distance vector."""
    if isinstance(d, DistanceVector):
        if d.layout != model.layout:
            raise DimensionError("distance-vector layout does not match the attack model")
        values = d.numpy()
    else:
        values = np.asarray(d, dtype=np.float64)
        if values.shape != model.weights.shape:
            raise DimensionError(f"expected {model.weights.shape[0]} features, got {values.shape}")
    return float(sigmoid(model._transform(values) @ model.weights + model.bias))


def _split_accuracy(model_w, model_b, features, labels, mean=None, std=None) -> float:
    feats = features if mean is None else (features - mean) / std
    probs = sigmoid(feats @ model_w + model_b)
    return float(np.mean((probs >= 0.5) == labels))


def build_labeled_distances(
    bundle: CheckpointBundle,
    refs: BNReferenceSet,
    member_images,
    nonmember_images,
    variant: VariantSpec,
    batch_size: int = 256,
) -> LabeledDistanceSet:
    """Compute the distance rows for labeled member/non-member image sets."""
    feats = []
    labels = []
    for images, label in ((member_images, 1), (nonmember_images, 0)):
        n = len(images)
        for start in range(0, n, batch_size):
            with torch.no_grad():
                m = distance_matrix(bundle, refs, images[start : start + batch_size], variant)
            feats.append(m.numpy().astype(np.float64))
            labels.append(np.full(len(m), label, dtype=np.int64))
    return LabeledDistanceSet(np.concatenate(feats), np.concatenate(labels))


def train_attack_model(
    member_images,
    nonmember_images,
    bundle: CheckpointBundle,
    refs: BNReferenceSet,
    variant: VariantSpec,
    iterations: int,
    step: float,
    eval_member_images,
    nonmember_eval_images,
    seed: int = 0,
    standardize: bool = False,
) -> AttackModel:
    """Train the membership classifier and return its best-iteration snapshot."""
    if len(member_images) == 0 or len(nonmember_images) == 0:
        raise DatasetError("training needs non-empty member and non-member sets")
    if len(eval_member_images) == 0 or len(nonmember_eval_images) == 0:
        raise DatasetError("evaluation split needs both classes")

    d_m = build_labeled_distances(bundle, refs, member_images, [], variant).features
    d_n = build_labeled_distances(bundle, refs, [], nonmember_images, variant).features
    eval_set = build_labeled_distances(bundle, refs, eval_member_images, nonmember_eval_images, variant)
    eval_set.require_both_classes()

    mean = std = None
    if standardize:
        train_rows = np.concatenate([d_m, d_n])
        mean = train_rows.mean(axis=0)
        std = np.maximum(train_rows.std(axis=0), 1e-12)
        d_m = (d_m - mean) / std
        d_n = (d_n - mean) / std

    layout = variant.layout(refs)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=len(layout))
    b = 0.0

    acc = _split_accuracy(w, b, eval_set.features, eval_set.labels, mean, std)
    trace = [acc]
    best_w, best_b, best_acc, best_iter = w.copy(), b, acc, 0

    for i in range(1, iterations + 1):
        p_m = sigmoid(d_m @ w + b)
        p_n = sigmoid(d_n @ w + b)
        grad_w = d_m.T @ (p_m - 1.0) / len(d_m) + d_n.T @ p_n / len(d_n)
        grad_b = float(np.mean(p_m - 1.0) + np.mean(p_n))
        if not (np.all(np.isfinite(grad_w)) and np.isfinite(grad_b)):
            raise TrainingDivergedError(f"non-finite gradient at iteration {i}")
        w = w - step * grad_w
        b = b - step * grad_b
        acc = _split_accuracy(w, b, eval_set.features, eval_set.labels, mean, std)
        trace.append(acc)
        if acc > best_acc:
            best_w, best_b, best_acc, best_iter = w.copy(), b, acc, i

    model = AttackModel(
        weights=best_w,
        bias=best_b,
        variant=variant,
        layout=layout,
        seed=seed,
        best_accuracy=best_acc,
        best_iteration=best_iter,
        accuracy_trace=trace,
        feature_mean=mean,
        feature_std=std,
    )
    # The stored best accuracy must be reproducible from the stored params.
    check = _split_accuracy(model.weights, model.bias, eval_set.features, eval_set.labels)
    if standardize:
        check = _split_accuracy(best_w, best_b, eval_set.features, eval_set.labels, mean, std)
    if check != best_acc:
        raise TrainingDivergedError("best-checkpoint bookkeeping failed to reproduce its accuracy")
    return model


def membership_scores(
    bundle: CheckpointBundle,
    refs: BNReferenceSet,
    variant: VariantSpec,
    model: AttackModel,
    images,
) -> torch.Tensor:
    """Membership probabilities for a batch; differentiable for tensor input."""
    matrix = distance_matrix(bundle, refs, images, variant)
    w = torch.as_tensor(model.weights, dtype=matrix.dtype)
    b = torch.as_tensor(model.bias, dtype=matrix.dtype)
    if model.standardized:
        mean = torch.as_tensor(model.feature_mean, dtype=matrix.dtype)
        std = torch.as_tensor(model.feature_std, dtype=matrix.dtype)
        matrix = (matrix - mean) / std
    return torch.sigmoid(matrix @ w + b)


def membership_score_pipeline(
    bundle: CheckpointBundle,
    refs: BNReferenceSet,
    variant: VariantSpec,
    model: AttackModel,
    image,
):
    """Distance extraction composed with the classifier, for one image.

    Returns a python float for array input; for a float tensor input the
    result is a scalar tensor with gradients back to the image.
    """
    if isinstance(image, np.ndarray) and image.ndim == 3:
        image = image[None]
    elif isinstance(image, torch.Tensor) and image.dim() == 3:
        image = image[None]
    scores = membership_scores(bundle, refs, variant, model, image)
    if isinstance(image, torch.Tensor) and scores.requires_grad:
        return scores[0]
    return float(scores[0])
