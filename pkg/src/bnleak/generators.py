"""Pretrained image generator handle and the desk-scale fallback generator.

The inversion stage only needs three things from a generator: a mapping
network taking standard-normal latents into a smoother intermediate space,
a deterministic synthesis network from that space to images, and gradient
flow from pixels back to the intermediate latent.

Paper-scale face generators are external artifacts. For self-contained
runs this module trains a small convolutional autoencoder on a reference
image pool and derives the mapping network from the empirical latent
distribution (a whitening-based affine map), which keeps desk-scale
training deterministic and stable where adversarial training is not.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import arrayio
from .errors import ArtifactMissingError
from .preprocess import PreprocessConfig, to_model_input


class ConvEncoder(nn.Module):
    def __init__(self, latent_dim: int, width: int = 32):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1),
            nn.PReLU(w),
            nn.Conv2d(w, w * 2, 4, stride=2, padding=1),
            nn.PReLU(w * 2),
            nn.Conv2d(w * 2, w * 4, 4, stride=2, padding=1),
            nn.PReLU(w * 4),
        )
        self.fc = nn.Linear(w * 4 * 4 * 4, latent_dim)

    def forward(self, x):
        return self.fc(self.net(x).flatten(1))


class ConvSynthesis(nn.Module):
    """Latent -> image decoder; output is float RGB in [0, 1]."""

    def __init__(self, latent_dim: int, output_size: int = 32, width: int = 32):
        super().__init__()
        if output_size % 8 != 0:
            raise ValueError("output_size must be divisible by 8")
        self.base = output_size // 8
        w = width
        self.fc = nn.Linear(latent_dim, w * 4 * self.base * self.base)
        self.width = w
        self.net = nn.Sequential(
            nn.ConvTranspose2d(w * 4, w * 2, 4, stride=2, padding=1),
            nn.PReLU(w * 2),
            nn.ConvTranspose2d(w * 2, w, 4, stride=2, padding=1),
            nn.PReLU(w),
            nn.ConvTranspose2d(w, 3, 4, stride=2, padding=1),
        )

    def forward(self, w_latent):
        h = self.fc(w_latent).view(-1, self.width * 4, self.base, self.base)
        return torch.sigmoid(self.net(h))


@dataclass
class GeneratorHandle:
    """Mapping + synthesis pair with fixed weights.

    synthesize() is deterministic in the latent, and gradients flow from
    the produced pixels back to it.
    """

    mapping: nn.Module
    synthesis: nn.Module
    z_dim: int
    w_dim: int
    output_size: int

    def __post_init__(self):
        self.mapping.eval()
        self.synthesis.eval()
        for p in self.mapping.parameters():
            p.requires_grad_(False)
        for p in self.synthesis.parameters():
            p.requires_grad_(False)

    def map_latents(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z[None]
        return self.mapping(z.to(torch.float32))

    def synthesize(self, w: torch.Tensor) -> torch.Tensor:
        if w.dim() == 1:
            w = w[None]
        return self.synthesis(w)

    def save(self, path: str) -> str:
        arrays = {f"mapping.{k}": v.detach().numpy() for k, v in self.mapping.state_dict().items()}
        arrays.update({f"synthesis.{k}": v.detach().numpy() for k, v in self.synthesis.state_dict().items()})
        manifest = {
            "kind": "generator",
            "z_dim": self.z_dim,
            "w_dim": self.w_dim,
            "output_size": self.output_size,
        }
        return arrayio.save_named_arrays(path, arrays, manifest)

    @staticmethod
    def load(path: str) -> "GeneratorHandle":
        try:
            arrays, manifest = arrayio.load_named_arrays(path)
        except FileNotFoundError as e:
            raise ArtifactMissingError(f"generator checkpoint not found: {path}") from e
        if manifest.get("kind") != "generator":
            raise ArtifactMissingError(f"{path} is not a generator checkpoint")
        z_dim, w_dim = int(manifest["z_dim"]), int(manifest["w_dim"])
        mapping = nn.Linear(z_dim, w_dim)
        mapping.load_state_dict({k[len("mapping.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("mapping.")})
        synthesis = ConvSynthesis(w_dim, output_size=int(manifest["output_size"]))
        synthesis.load_state_dict(
            {k[len("synthesis.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("synthesis.")}
        )
        return GeneratorHandle(mapping, synthesis, z_dim, w_dim, int(manifest["output_size"]))


def train_toy_generator(
    images: np.ndarray,
    latent_dim: int = 32,
    output_size: int = 32,
    epochs: int = 40,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
) -> GeneratorHandle:
    """Train the fallback generator on an image pool.

    An autoencoder learns the synthesis network; the mapping network is
    the affine map sending N(0, I) to the empirical moments (mean and
    covariance Cholesky factor) of the encoded pool, so sampled latents
    land in the region the decoder was trained on.
    """
    torch.manual_seed(seed)
    encoder = ConvEncoder(latent_dim)
    synthesis = ConvSynthesis(latent_dim, output_size=output_size)
    params = list(encoder.parameters()) + list(synthesis.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)

    # Work in plain [0, 1] image space at the generator's own geometry.
    x = to_model_input(images, PreprocessConfig(image_size=output_size, mean=(0, 0, 0), std=(1, 1, 1)))
    g = torch.Generator().manual_seed(seed)
    n = len(x)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=g)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            recon = synthesis(encoder(x[idx]))
            loss = torch.mean((recon - x[idx]) ** 2)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    encoder.eval()
    with torch.no_grad():
        latents = torch.cat([encoder(x[i : i + 256]) for i in range(0, n, 256)]).double().numpy()
    mean = latents.mean(axis=0)
    cov = np.cov(latents, rowvar=False) + 1e-4 * np.eye(latent_dim)
    chol = np.linalg.cholesky(cov)

    mapping = nn.Linear(latent_dim, latent_dim)
    with torch.no_grad():
        mapping.weight.copy_(torch.from_numpy(chol).float())
        mapping.bias.copy_(torch.from_numpy(mean).float())
    return GeneratorHandle(mapping, synthesis, z_dim=latent_dim, w_dim=latent_dim, output_size=output_size)
