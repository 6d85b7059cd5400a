"""Procedural face-like image corpus for desk-scale experiments.

Each identity is a parameter vector (head geometry, skin tone, eye layout,
mouth shape, hair patch) drawn from a seeded prior. Each image renders
that identity with per-image jitter: pose (a continuous lean that drags
the hair patch sideways), position shifts, lateral and vertical lighting
gradients, expression changes, an occluder patch and pixel noise.

Like real face corpora, each identity's shots include both facings: half
of every identity's images are mirrored-geometry re-takes of the other
half (fresh lighting and noise). Twin shots share a group id so that
group-aware holdouts do not leak a mirrored view of a held-out image.

`family` selects a capture-source palette; families stand in for distinct
datasets (different acquisition conditions, same kind of faces).

Rendering is pure numpy and deterministic in (seed, family, identity,
image index).
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np


def _soft_ellipse(xx, yy, cx, cy, rx, ry, sharpness=28.0):
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    z = np.clip(sharpness * (1.0 - d), -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-z))


def _blend(img, color, mask):
    return img * (1.0 - mask[..., None]) + np.asarray(color)[None, None, :] * mask[..., None]


def _identity_params(rng: np.random.Generator, family: int = 0) -> Dict[str, np.ndarray]:
    # Priors are deliberately narrow: identities differ by small geometry
    # and color offsets on a shared face layout, comparable in scale to the
    # per-image jitter, so recognition requires fine detail.
    #
    # family > 0 shifts a few color priors slightly, giving a second
    # capture source with the same kind of faces but a different palette,
    # the way two face datasets differ in acquisition conditions.
    f = 0.06 * family
    return {
        "bg": rng.uniform(0.12 + f, 0.3 + f, size=3),
        "skin": rng.uniform([0.55 + f, 0.4 + f, 0.3 + f], [0.85 + f, 0.7 + f, 0.55 + f]),
        "head_rx": rng.uniform(0.29, 0.36),
        "head_ry": rng.uniform(0.33, 0.41),
        "eye_y": rng.uniform(0.38, 0.44),
        "eye_dx": rng.uniform(0.12, 0.17),
        "eye_r_left": rng.uniform(0.032, 0.055),
        "eye_r_right": rng.uniform(0.032, 0.055),
        "eye_color": rng.uniform(0.02, 0.2, size=3),
        "mouth_y": rng.uniform(0.62, 0.7),
        "mouth_rx": rng.uniform(0.09, 0.15),
        "mouth_ry": rng.uniform(0.02, 0.042),
        "mouth_color": rng.uniform([0.45, 0.1, 0.1], [0.75, 0.3, 0.3]),
        "hair_side": rng.integers(0, 2),  # 0 = left bias, 1 = right bias
        "hair_w": rng.uniform(0.11, 0.19),
        "hair_color": rng.uniform(0.02 + f, 0.25 + f, size=3),
    }


def draw_jitter(rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Per-image shot parameters, drawn in a fixed order."""
    return {
        "dx": rng.uniform(-0.08, 0.08),
        "dy": rng.uniform(-0.08, 0.08),
        "light": rng.uniform(0.9, 1.1),
        "cast": rng.uniform(0.95, 1.05, size=3),
        "grad_v": rng.uniform(-0.1, 0.1),
        "grad_h": rng.uniform(-0.4, 0.4),  # signed lateral lighting
        "eye_jit": rng.uniform(-0.02, 0.02),
        "eye_dx_jit": rng.uniform(-0.02, 0.02),
        "eye_r_jit": rng.uniform(-0.01, 0.01, size=2),
        "head_jit": rng.uniform(-0.02, 0.02, size=2),
        "skin_jit": rng.uniform(-0.08, 0.08, size=3),
        "mouth_jit": rng.uniform(-0.03, 0.03),
        "mouth_scale": rng.uniform(0.8, 1.2),
        # Continuous pose in [-1, 1]: 0 is a frontal, nearly symmetric
        # shot; the sign says which way the subject leans.
        "pose": rng.uniform(-1.0, 1.0),
        "occ_x": rng.uniform(0.1, 0.9),
        "occ_y": rng.uniform(0.1, 0.9),
        "occ_w": rng.uniform(0.08, 0.22),
        "occ_h": rng.uniform(0.08, 0.22),
        "occ_color": rng.uniform(0.0, 1.0, size=3),
    }


def mirror_jitter(jit: Dict) -> Dict:
    """Shot parameters of the horizontally mirrored take of the same scene."""
    out = dict(jit)
    out["dx"] = -jit["dx"]
    out["pose"] = -jit["pose"]
    out["grad_h"] = -jit["grad_h"]
    out["occ_x"] = 1.0 - jit["occ_x"]
    out["eye_r_jit"] = jit["eye_r_jit"][::-1].copy()
    return out


def render_face(
    params: Dict, jitter: Dict, noise_rng: np.random.Generator, size: int = 32
) -> np.ndarray:
    """Render one shot of an identity as float RGB in [0, 1]."""
    coords = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(coords, coords)  # xx: width axis, yy: height axis

    grad = (1.0 + jitter["grad_v"] * (yy - 0.5)) * (1.0 + jitter["grad_h"] * (xx - 0.5))
    img = np.ones((size, size, 3)) * params["bg"][None, None, :]
    cx, cy = 0.5 + jitter["dx"], 0.5 + jitter["dy"]

    head = _soft_ellipse(
        xx, yy, cx, cy, params["head_rx"] + jitter["head_jit"][0], params["head_ry"] + jitter["head_jit"][1]
    )
    img = _blend(img, np.clip(params["skin"] + jitter["skin_jit"], 0.0, 1.0), head)

    # Hair patch drifts to the side the subject leans toward; frontal
    # shots keep it centered.
    side = -1.0 if params["hair_side"] == 0 else 1.0
    hair_cx = cx + params["hair_w"] * 1.5 * jitter["pose"] * side
    hair = _soft_ellipse(xx, yy, hair_cx, cy - params["head_ry"] * 0.72, params["hair_w"], 0.13)
    img = _blend(img, params["hair_color"], hair * head)

    ey = cy + (params["eye_y"] - 0.5) + jitter["eye_jit"]
    edx = params["eye_dx"] + jitter["eye_dx_jit"]
    r_a = params["eye_r_left"] + jitter["eye_r_jit"][0]
    r_b = params["eye_r_right"] + jitter["eye_r_jit"][1]
    eye_l = _soft_ellipse(xx, yy, cx - edx, ey, r_a, r_a)
    eye_r = _soft_ellipse(xx, yy, cx + edx, ey, r_b, r_b)
    img = _blend(img, params["eye_color"], np.clip(eye_l + eye_r, 0.0, 1.0))

    mouth = _soft_ellipse(
        xx,
        yy,
        cx,
        cy + (params["mouth_y"] - 0.5) + jitter["mouth_jit"],
        params["mouth_rx"] * jitter["mouth_scale"],
        params["mouth_ry"],
    )
    img = _blend(img, params["mouth_color"], mouth)

    img = img * jitter["light"] * grad[..., None] * jitter["cast"][None, None, :]

    # Occluder patch: some views are genuinely hard, so recognition never
    # saturates and hard views must be memorized during training.
    occ = (
        (xx > jitter["occ_x"] - jitter["occ_w"])
        & (xx < jitter["occ_x"] + jitter["occ_w"])
        & (yy > jitter["occ_y"] - jitter["occ_h"])
        & (yy < jitter["occ_y"] + jitter["occ_h"])
    ).astype(float)
    img = _blend(img, jitter["occ_color"], occ)

    img = img + noise_rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class ImageSet:
    """In-memory labeled image collection.

    images are uint8 HWC RGB; identities are global identity indices; ids
    are stable string keys ("f0_p0003_i0041") usable in split manifests.
    groups mark sets of images that are takes of the same scene (mirror
    twins); splits that must not leak near-duplicates hold out whole
    groups.
    """

    images: np.ndarray
    identities: np.ndarray
    ids: List[str]
    groups: np.ndarray = None
    _index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.groups is None:
            self.groups = np.arange(len(self.ids), dtype=np.int64)
        if not (len(self.images) == len(self.identities) == len(self.ids) == len(self.groups)):
            raise ValueError("images, identities, ids and groups must have equal length")
        self._index = {img_id: i for i, img_id in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate image ids")

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, img_id: str) -> int:
        return self._index[img_id]

    def identity_of(self, img_id: str) -> int:
        return int(self.identities[self._index[img_id]])

    def subset(self, ids: Sequence[str]) -> "ImageSet":
        idx = [self._index[i] for i in ids]
        return ImageSet(self.images[idx], self.identities[idx], [self.ids[i] for i in idx], self.groups[idx])

    def select_identities(self, identities: Iterable[int]) -> "ImageSet":
        wanted = set(int(i) for i in identities)
        mask = np.array([int(p) in wanted for p in self.identities])
        idx = np.nonzero(mask)[0]
        return ImageSet(self.images[idx], self.identities[idx], [self.ids[i] for i in idx], self.groups[idx])

    def class_labels(self) -> np.ndarray:
        """Identities relabeled to a contiguous 0..n-1 range (sorted order)."""
        uniq = np.unique(self.identities)
        remap = {int(p): k for k, p in enumerate(uniq)}
        return np.array([remap[int(p)] for p in self.identities], dtype=np.int64)

    def num_identities(self) -> int:
        return int(np.unique(self.identities).size)


def make_corpus(
    n_identities: int,
    images_per_identity: int,
    image_size: int = 32,
    seed: int = 0,
    family: int = 0,
    first_identity: int = 0,
) -> ImageSet:
    """Generate a deterministic corpus of `n_identities * images_per_identity` images.

    Image index j in the second half of an identity's shots is the exact
    pixel mirror of image j - images_per_identity//2. Mirrored duplicates
    are a well-known artifact of web-collected face corpora; they also
    make every corpus exactly closed under horizontal flipping. Twins
    share a group id.
    """
    n_img = n_identities * images_per_identity
    images = np.empty((n_img, image_size, image_size, 3), dtype=np.uint8)
    identities = np.empty(n_img, dtype=np.int64)
    groups = np.empty(n_img, dtype=np.int64)
    ids = []
    half = images_per_identity // 2
    k = 0
    for person in range(first_identity, first_identity + n_identities):
        params = _identity_params(np.random.default_rng([seed, family, person]), family=family)
        for j in range(images_per_identity):
            if j >= half:
                images[k] = images[k - half][:, ::-1, :]
                groups[k] = groups[k - half]
            else:
                jit = draw_jitter(np.random.default_rng([seed, family, person, j]))
                noise_rng = np.random.default_rng([seed, family, person, j, 2])
                img = render_face(params, jit, noise_rng, size=image_size)
                images[k] = np.round(img * 255.0).astype(np.uint8)
                groups[k] = person * images_per_identity + j
            identities[k] = person
            ids.append(f"f{family}_p{person:04d}_i{j:04d}")
            k += 1
    return ImageSet(images, identities, ids, groups)


def merge_image_sets(*sets: ImageSet) -> ImageSet:
    """Concatenate corpora; image ids and identity indices must not collide."""
    images = np.concatenate([s.images for s in sets])
    identities = np.concatenate([s.identities for s in sets])
    ids = [i for s in sets for i in s.ids]
    groups = np.concatenate([s.groups for s in sets])
    return ImageSet(images, identities, ids, groups)
