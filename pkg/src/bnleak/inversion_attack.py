"""Stage 2: latent-space inversion guided by the membership classifier.

Latents are sampled from N(0, I), mapped into the generator's
intermediate space, and the best-scoring tenth of the synthesized images
(by membership probability) survives as candidates. Each candidate latent
then descends the cross-entropy between its augmentation-averaged
membership probability and the member label, re-synthesizing the image
every step.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import arrayio
from .bn_reference import BNReferenceSet
from .distance_features import VariantSpec
from .errors import DegenerateSamplingError, DivergedCandidateError
from .generators import GeneratorHandle
from .mi_attack import AttackModel, membership_scores
from .target_zoo import CheckpointBundle

logger = logging.getLogger(__name__)


class HorizontalFlipAug:
    name = "hflip"

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        return torch.flip(batch, dims=[-1])


class CenterCropResizeAug:
    def __init__(self, scale: float = 0.9):
        if not 0.0 < scale <= 1.0:
            raise ValueError("crop scale must be in (0, 1]")
        self.scale = scale
        self.name = f"crop{scale:g}"

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        h, w = batch.shape[-2:]
        ch, cw = max(1, int(round(h * self.scale))), max(1, int(round(w * self.scale)))
        top, left = (h - ch) // 2, (w - cw) // 2
        crop = batch[..., top : top + ch, left : left + cw]
        return F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)


class BrightnessAug:
    def __init__(self, factor: float = 1.1):
        self.factor = factor
        self.name = f"brightness{factor:g}"

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        return batch * self.factor


class AugmentationSuite:
    """Ordered list of deterministic, differentiable image transforms."""

    def __init__(self, transforms: Sequence = ()):
        self.transforms = list(transforms)

    def __len__(self) -> int:
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)

    @property
    def names(self) -> List[str]:
        return [t.name for t in self.transforms]

    @staticmethod
    def default() -> "AugmentationSuite":
        return AugmentationSuite([HorizontalFlipAug(), CenterCropResizeAug(0.9), BrightnessAug(1.1)])

    @staticmethod
    def from_names(names: Sequence[str]) -> "AugmentationSuite":
        transforms = []
        for name in names:
            if name == "hflip":
                transforms.append(HorizontalFlipAug())
            elif name.startswith("crop"):
                transforms.append(CenterCropResizeAug(float(name[len("crop") :])))
            elif name.startswith("brightness"):
                transforms.append(BrightnessAug(float(name[len("brightness") :])))
            else:
                raise ValueError(f"unknown augmentation {name!r}")
        return AugmentationSuite(transforms)


@dataclass
class MembershipScorer:
    """Differentiable image -> membership probability pipeline.

    Accepts [0, 1] float image batches of any spatial size; the pinned
    preprocessing resizes them to the recognition geometry.
    """

    bundle: CheckpointBundle
    refs: BNReferenceSet
    variant: VariantSpec
    model: AttackModel

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images[None]
        return membership_scores(self.bundle, self.refs, self.variant, self.model, images)


@dataclass
class LatentCandidate:
    """One optimized latent with its probability trace.

    prob_trace[i] is the augmentation-averaged membership probability at
    the start of iteration i; the final entry is evaluated after the last
    update, so the trace has iterations + 1 entries.
    """

    index: int
    z: Optional[np.ndarray]
    w_initial: np.ndarray
    w: np.ndarray
    image: np.ndarray
    prob_trace: List[float]

    def __post_init__(self):
        if any(not (0.0 <= p <= 1.0) for p in self.prob_trace):
            raise ValueError("probability trace entries must lie in [0, 1]")


@dataclass
class CandidateSet:
    """Survivors of selection + optimization for one inversion run."""

    candidates: List[LatentCandidate]
    n_sampled: int
    initial_scores: np.ndarray  # scores of all n_sampled synthesized images
    kept_indices: List[int]
    diverged_indices: List[int] = field(default_factory=list)

    @property
    def images(self) -> np.ndarray:
        return np.stack([c.image for c in self.candidates])

    def expected_count(self) -> int:
        return int(0.1 * self.n_sampled)


def sample_initial_latents(n: int, z_dim: int, seed: int) -> np.ndarray:
    """n standard-normal latent vectors; n must keep the top tenth nonempty."""
    if n < 10:
        raise DegenerateSamplingError(f"need at least 10 samples, got {n} (top tenth would be empty)")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, z_dim))


def select_candidates(
    z: np.ndarray,
    generator: GeneratorHandle,
    scorer: Callable[[torch.Tensor], torch.Tensor],
    batch_size: int = 64,
):
    """Map, synthesize and score all latents; keep the top tenth.

    Returns (w0 array of shape (k, w_dim), all_scores, kept_indices) with
    k = int(0.1 * len(z)). Ties keep the lower sample index.
    """
    n = len(z)
    k = int(0.1 * n)
    if k < 1:
        raise DegenerateSamplingError(f"{n} samples leave an empty candidate set")
    ws, scores = [], []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            w = generator.map_latents(torch.from_numpy(z[start : start + batch_size]).float())
            images = generator.synthesize(w)
            ws.append(w)
            scores.append(scorer(images))
    w_all = torch.cat(ws).numpy()
    all_scores = torch.cat(scores).numpy()
    order = np.argsort(-all_scores, kind="stable")
    kept = order[:k]
    return w_all[kept], all_scores, [int(i) for i in kept]


def averaged_membership_probability(
    image: torch.Tensor, suite: AugmentationSuite, scorer: Callable[[torch.Tensor], torch.Tensor]
) -> torch.Tensor:
    """Mean membership probability over the image and its augmented views."""
    if image.dim() == 3:
        image = image[None]
    views = [image] + [t(image) for t in suite]
    scores = scorer(torch.cat(views))
    return scores.mean()


def optimize_candidate(
    w0: np.ndarray,
    iterations: int,
    step: float,
    suite: AugmentationSuite,
    generator: GeneratorHandle,
    scorer: Callable[[torch.Tensor], torch.Tensor],
    index: int = 0,
    z: Optional[np.ndarray] = None,
) -> LatentCandidate:
    """Plain gradient descent on CE(averaged probability, member label)."""
    w = torch.from_numpy(np.asarray(w0, dtype=np.float32)).clone().requires_grad_(True)
    trace: List[float] = []
    for i in range(iterations):
        image = generator.synthesize(w)
        p = averaged_membership_probability(image, suite, scorer)
        loss = F.binary_cross_entropy(p.reshape(1), torch.ones(1, dtype=p.dtype))
        (grad,) = torch.autograd.grad(loss, w)
        if not torch.all(torch.isfinite(grad)):
            raise DivergedCandidateError(f"non-finite gradient at iteration {i} (candidate {index})")
        trace.append(float(p))
        with torch.no_grad():
            w -= step * grad
    with torch.no_grad():
        image = generator.synthesize(w)
        trace.append(float(averaged_membership_probability(image, suite, scorer)))
    return LatentCandidate(
        index=index,
        z=None if z is None else np.asarray(z),
        w_initial=np.asarray(w0, dtype=np.float32),
        w=w.detach().numpy().copy(),
        image=image[0].numpy().copy(),
        prob_trace=trace,
    )


def run_inversion(
    n_samples: int,
    iterations: int,
    seed: int,
    generator: GeneratorHandle,
    scorer: Callable[[torch.Tensor], torch.Tensor],
    suite: Optional[AugmentationSuite] = None,
    step: float = 0.05,
) -> CandidateSet:
    """Algorithm: sample, select the top tenth, optimize each survivor."""
    suite = AugmentationSuite.default() if suite is None else suite
    z = sample_initial_latents(n_samples, generator.z_dim, seed)
    w0_kept, all_scores, kept = select_candidates(z, generator, scorer)
    candidates, diverged = [], []
    for row, idx in enumerate(kept):
        try:
            candidates.append(
                optimize_candidate(
                    w0_kept[row], iterations, step, suite, generator, scorer, index=idx, z=z[idx]
                )
            )
        except DivergedCandidateError as e:
            logger.warning("dropping candidate %d: %s", idx, e)
            diverged.append(idx)
    if not candidates:
        raise DivergedCandidateError("every selected candidate diverged; nothing to return")
    return CandidateSet(
        candidates=candidates,
        n_sampled=n_samples,
        initial_scores=all_scores,
        kept_indices=kept,
        diverged_indices=diverged,
    )


def dump_candidates(out_dir: str, cset: CandidateSet, run_params: dict) -> None:
    """Write candidate images, a trace manifest and the latents container."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    for i, cand in enumerate(cset.candidates):
        img = (np.clip(np.transpose(cand.image, (1, 2, 0)), 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(img).save(os.path.join(out_dir, f"candidate_{i:03d}.png"))

    with open(os.path.join(out_dir, "candidates.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["candidate", "sample_index", "iteration", "probability"])
        for i, cand in enumerate(cset.candidates):
            for it, p in enumerate(cand.prob_trace):
                writer.writerow([i, cand.index, it, f"{p:.10g}"])

    arrays = {
        "initial_scores": cset.initial_scores,
        "kept_indices": np.asarray(cset.kept_indices, dtype=np.int64),
        "w_initial": np.stack([c.w_initial for c in cset.candidates]),
        "w_final": np.stack([c.w for c in cset.candidates]),
        "z": np.stack([c.z for c in cset.candidates]),
    }
    manifest = {
        "kind": "inversion_latents",
        "n_sampled": cset.n_sampled,
        "diverged_indices": cset.diverged_indices,
        **{k: run_params[k] for k in sorted(run_params)},
    }
    arrayio.save_named_arrays(os.path.join(out_dir, "latents.npz"), arrays, manifest)
