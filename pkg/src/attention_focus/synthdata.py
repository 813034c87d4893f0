"""Synthetic "distracted attention" benchmark.

Every image is a grid of patches.  A few object patches carry a shared
objectness pattern plus a class template; the remaining background patches
carry a scene pattern (the sample's class with probability ``rho``, a uniform
draw otherwise) plus a per-image texture.  Augmentation resamples the texture
strongly for labeled images and only slightly for unlabeled ones, so for
unlabeled data the background is a stable per-image signature that
instance-level contrastive learning can latch onto.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    known_classes: int = 4
    num_patches: int = 16
    patch_side: int = 8
    channels: int = 1
    object_patch_count: int = 4
    samples_per_class: int = 100
    labeled_fraction: float = 0.5
    background_correlation: float = 0.9
    labeled_bg_jitter: float = 1.0
    unlabeled_bg_jitter: float = 0.1
    object_jitter: float = 0.1
    object_signal: float = 1.0
    objectness: float = 1.0
    object_noise: float = 0.3
    scene_scale: float = 1.0
    texture_scale: float = 2.0
    background_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.known_classes < self.num_classes:
            raise SpecError("need 0 < known_classes < num_classes")
        if not 0 <= self.object_patch_count < self.num_patches:
            raise SpecError("need 0 <= object_patch_count < num_patches")
        side = int(round(np.sqrt(self.num_patches)))
        if side * side != self.num_patches:
            raise SpecError("num_patches must be a perfect square")
        if not 0.0 <= self.background_correlation <= 1.0:
            raise SpecError("background_correlation must lie in [0, 1]")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise SpecError("labeled_fraction must lie in [0, 1]")
        for name in ("labeled_bg_jitter", "unlabeled_bg_jitter"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1]")
        if self.unlabeled_bg_jitter > self.labeled_bg_jitter:
            raise SpecError("unlabeled_bg_jitter must not exceed labeled_bg_jitter")

    @property
    def grid_side(self) -> int:
        return int(round(np.sqrt(self.num_patches)))

    @property
    def image_side(self) -> int:
        return self.grid_side * self.patch_side

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


@dataclass
class Templates:
    objectness: np.ndarray  # (P,)
    classes: np.ndarray  # (K, P)
    scenes: np.ndarray  # (K, P)


def make_templates(spec: SynthSpec) -> Templates:
    rng = np.random.default_rng([spec.seed, 0])
    p = spec.patch_dim
    return Templates(
        objectness=rng.normal(size=p) * spec.objectness,
        classes=rng.normal(size=(spec.num_classes, p)) * spec.object_signal,
        scenes=rng.normal(size=(spec.num_classes, p)) * spec.scene_scale,
    )


@dataclass
class SynthSample:
    image: np.ndarray
    label: int
    labeled: bool
    is_old: bool
    object_mask: np.ndarray  # sorted patch indices


@dataclass
class SynthDataset:
    spec: SynthSpec
    patches: np.ndarray  # (M, N, P)
    labels: np.ndarray
    labeled: np.ndarray
    is_old: np.ndarray
    scenes: np.ndarray  # background scene id per sample
    object_masks: np.ndarray  # (M, N) bool

    def __len__(self):
        return len(self.labels)

    @property
    def images(self) -> np.ndarray:
        return patches_to_images(self.patches, self.spec)

    def sample(self, i: int) -> SynthSample:
        return SynthSample(
            patches_to_images(self.patches[i : i + 1], self.spec)[0],
            int(self.labels[i]),
            bool(self.labeled[i]),
            bool(self.is_old[i]),
            np.flatnonzero(self.object_masks[i]),
        )

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.labeled)


def patches_to_images(patches: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """(M, N, P) -> (M, H, W, C), inverse of the backbone's row-major patch order."""
    m, g, s, c = patches.shape[0], spec.grid_side, spec.patch_side, spec.channels
    x = patches.reshape(m, g, g, s, s, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(m, g * s, g * s, c)


def images_to_patches(images: np.ndarray, spec: SynthSpec) -> np.ndarray:
    m, g, s, c = images.shape[0], spec.grid_side, spec.patch_side, spec.channels
    x = images.reshape(m, g, s, g, s, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(m, g * g, s * s * c)


def _texture(rng: np.random.Generator, spec: SynthSpec, n_bg: int) -> np.ndarray:
    shared = rng.normal(size=spec.patch_dim) * spec.texture_scale
    return shared[None, :] + rng.normal(size=(n_bg, spec.patch_dim)) * spec.background_noise


def generate(spec: SynthSpec) -> SynthDataset:
    """Deterministic in ``spec``; sample i draws from its own stream (seed, 1, i)."""
    tpl = make_templates(spec)
    n, p, k = spec.num_patches, spec.patch_dim, spec.num_classes
    m = k * spec.samples_per_class
    labels = np.repeat(np.arange(k), spec.samples_per_class)
    is_old = labels < spec.known_classes
    n_lab = int(round(spec.labeled_fraction * spec.samples_per_class))
    labeled = np.zeros(m, dtype=bool)
    for c in range(spec.known_classes):
        labeled[c * spec.samples_per_class : c * spec.samples_per_class + n_lab] = True

    patches = np.empty((m, n, p))
    masks = np.zeros((m, n), dtype=bool)
    scenes = np.empty(m, dtype=np.int64)
    n_obj = spec.object_patch_count
    for i in range(m):
        rng = np.random.default_rng([spec.seed, 1, i])
        c = labels[i]
        obj = rng.choice(n, size=n_obj, replace=False)
        masks[i, obj] = True
        scene = c if rng.random() < spec.background_correlation else rng.integers(k)
        scenes[i] = scene
        patches[i, masks[i]] = (
            tpl.objectness + tpl.classes[c] + rng.normal(size=(n_obj, p)) * spec.object_noise
        )
        patches[i, ~masks[i]] = tpl.scenes[scene] + _texture(rng, spec, n - n_obj)
    return SynthDataset(spec, patches, labels, labeled, is_old, scenes, masks)


def augment_patches(
    data: SynthDataset, indices: np.ndarray, rng: np.random.Generator, tpl: Templates | None = None
) -> np.ndarray:
    """One augmented view (len(indices), N, P) of the selected samples.

    Object patches get isotropic noise of size ``object_jitter``.  The
    background texture is blended with a fresh draw,
    ``sqrt(1 - j^2) * old + j * new``, so j = 0 leaves it untouched and
    j = 1 replaces it; j is the labeled or unlabeled jitter per sample.
    """
    spec = data.spec
    tpl = tpl or make_templates(spec)
    indices = np.asarray(indices)
    x = data.patches[indices].copy()
    masks = data.object_masks[indices]
    jit = np.where(data.labeled[indices], spec.labeled_bg_jitter, spec.unlabeled_bg_jitter)
    b, n, p = x.shape

    scene = tpl.scenes[data.scenes[indices]][:, None, :]
    texture = x - scene
    fresh = rng.normal(size=(b, 1, p)) * spec.texture_scale + rng.normal(size=(b, n, p)) * spec.background_noise
    mixed = scene + np.sqrt(1.0 - jit**2)[:, None, None] * texture + jit[:, None, None] * fresh
    obj_noise = rng.normal(size=(b, n, p)) * spec.object_jitter
    return np.where(masks[:, :, None], x + obj_noise, mixed)


def augment(sample_index: int, data: SynthDataset, rng: np.random.Generator) -> np.ndarray:
    """Single augmented image (H, W, C)."""
    view = augment_patches(data, np.array([sample_index]), rng)
    return patches_to_images(view, data.spec)[0]


def pruning_precision(pruned, object_mask) -> float:
    """Fraction of pruned tokens that are background; 1.0 when nothing is pruned.

    ``pruned`` is a PruneOutcome or an iterable of patch indices.
    """
    pruned = list(getattr(pruned, "pruned", pruned))
    if not pruned:
        return 1.0
    obj = set(int(i) for i in np.atleast_1d(object_mask))
    return sum(int(i) not in obj for i in pruned) / len(pruned)


def pruning_precision_batch(keep: np.ndarray, object_masks: np.ndarray) -> tuple[float, int]:
    """Pooled precision over a batch of (M, N) keep flags; returns (precision, pruned count)."""
    pruned = ~keep
    total = int(pruned.sum())
    if total == 0:
        return 1.0, 0
    return float((pruned & ~object_masks).sum() / total), total


# ---------------------------------------------------------------------------
# binary dump
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"AFDS"
DATASET_VERSION = 1


def save_dataset(data: SynthDataset, path) -> None:
    """Flat little-endian file plus a ``.json`` sidecar with the generating spec."""
    path = Path(path)
    spec = data.spec
    images = data.images
    chunks = [
        DATASET_MAGIC,
        struct.pack("<IIIII", DATASET_VERSION, len(data), spec.image_side, spec.channels, spec.num_patches),
    ]
    for i in range(len(data)):
        obj = np.flatnonzero(data.object_masks[i])
        chunks.append(struct.pack("<IBBIH", int(data.labels[i]), int(data.labeled[i]), int(data.is_old[i]), int(data.scenes[i]), len(obj)))
        chunks.append(obj.astype("<u2").tobytes())
        chunks.append(images[i].astype("<f8").tobytes(order="C"))
    path.write_bytes(b"".join(chunks))
    sidecar_path(path).write_text(spec.to_json())


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def load_dataset(path) -> SynthDataset:
    path = Path(path)
    spec = SynthSpec.from_json(sidecar_path(path).read_text())
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not an AFDS dataset")
    version, count, side, channels, n = struct.unpack_from("<IIIII", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 24
    rec = struct.calcsize("<IBBIH")
    labels, labeled, is_old, scenes = [], [], [], []
    masks = np.zeros((count, n), dtype=bool)
    images = np.empty((count, side, side, channels))
    img_bytes = side * side * channels * 8
    for i in range(count):
        lab, is_lab, old, scene, n_obj = struct.unpack_from("<IBBIH", raw, off)
        off += rec
        obj = np.frombuffer(raw[off : off + 2 * n_obj], dtype="<u2")
        off += 2 * n_obj
        masks[i, obj] = True
        images[i] = np.frombuffer(raw[off : off + img_bytes], dtype="<f8").reshape(side, side, channels)
        off += img_bytes
        labels.append(lab)
        labeled.append(bool(is_lab))
        is_old.append(bool(old))
        scenes.append(scene)
    return SynthDataset(
        spec,
        images_to_patches(images, spec),
        np.array(labels, dtype=np.int64),
        np.array(labeled),
        np.array(is_old),
        np.array(scenes, dtype=np.int64),
        masks,
    )
