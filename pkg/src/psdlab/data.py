"""Synthetic noisy image-text pair generation and binary dataset files.

Each class draws a latent mean; each image draws a latent around its class
mean; image and caption features are independent random projections of the
same latent plus independent feature noise, which creates genuine cross-modal
many-to-many similarity structure. Corruption reassigns whole caption groups
among a chosen subset of images via a cyclic shift, so every corrupted image
carries captions generated for a different image (never its own) and the
corrupted count is exact.

Dataset file format (PSDD, version 1, all little-endian):

    bytes 0..3   magic b"PSDD"
    u32          format version (1)
    u32          n (images), m (captions per image), image_dim, text_dim, K
    f64          image features, n * image_dim row-major
    f64          text features, (n*m) * text_dim row-major
    u32          pairing table, n * m (caption row indices per image)
    u32          class labels, n
    u8           corrupted flags, n
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    InvalidInputError,
    TruncatedFileError,
    VersionMismatchError,
)
from .numkit import RngState, as_matrix

_MAGIC = b"PSDD"
_VERSION = 1
_MAX_COUNT = 1 << 24

# Latent geometry constants: class means are standard Gaussian, instances
# spread around them at this scale. Feature noise is the spec'd sigma knob.
LATENT_SPREAD = 0.5


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for one synthetic paired dataset."""

    num_classes: int = 10
    latent_dim: int = 16
    image_dim: int = 64
    text_dim: int = 48
    samples_per_class: int = 200
    feature_noise_sigma: float = 0.05
    mismatch_rate: float = 0.0
    captions_per_image: int = 1

    def __post_init__(self):
        counts = (self.num_classes, self.latent_dim, self.image_dim,
                  self.text_dim, self.samples_per_class, self.captions_per_image)
        if any(c < 1 for c in counts):
            raise InvalidInputError(f"all counts must be >= 1, got {counts}")
        if self.num_classes < 2:
            raise InvalidInputError("at least 2 classes are required")
        if any(c > _MAX_COUNT for c in counts):
            raise DimensionOverflowError(f"count exceeds {_MAX_COUNT}")
        if not (0.0 <= self.mismatch_rate <= 1.0):
            raise InvalidInputError(f"mismatch rate must lie in [0, 1], got {self.mismatch_rate}")
        if self.feature_noise_sigma < 0.0:
            raise InvalidInputError("feature noise sigma must be nonnegative")

    @property
    def num_samples(self) -> int:
        return self.num_classes * self.samples_per_class


@dataclass
class PairedDataset:
    """Images, caption pools, ownership table, and ground-truth provenance."""

    image_features: np.ndarray      # (n, image_dim)
    text_features: np.ndarray       # (n*m, text_dim)
    pairing: np.ndarray             # (n, m) caption row indices owned per image
    class_labels: np.ndarray        # (n,)
    corrupted: np.ndarray           # (n,) bool, captions came from another image

    def __post_init__(self):
        self.image_features = as_matrix(self.image_features, "image features")
        self.text_features = as_matrix(self.text_features, "text features")
        self.pairing = np.asarray(self.pairing, dtype=np.int64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.corrupted = np.asarray(self.corrupted, dtype=bool)
        n = self.image_features.shape[0]
        if self.pairing.ndim != 2 or self.pairing.shape[0] != n:
            raise InvalidInputError("pairing must be (n, m)")
        if self.class_labels.shape != (n,) or self.corrupted.shape != (n,):
            raise InvalidInputError("labels and corruption flags must have one entry per image")
        cover = np.sort(self.pairing.ravel())
        if not np.array_equal(cover, np.arange(self.text_features.shape[0], dtype=np.int64)):
            raise InvalidInputError("pairing must cover every caption row exactly once")

    @property
    def num_samples(self) -> int:
        return self.image_features.shape[0]

    @property
    def captions_per_image(self) -> int:
        return self.pairing.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.class_labels.max()) + 1 if self.class_labels.size else 0


def generate(spec: SyntheticSpec, rng: RngState) -> PairedDataset:
    """Sample one dataset. RNG consumption order (part of the contract, the
    generator-replay tests depend on it):

        1. class means, K x latent_dim
        2. image projection, latent_dim x image_dim
        3. text projection, latent_dim x text_dim
        4. per-image latents, n x latent_dim
        5. image feature noise, n x image_dim
        6. caption feature noise, (n*m) x text_dim
        7. corruption permutation of 0..n-1

    Corruption: the first floor(eta*n) entries of the permutation form the
    corrupted set; caption groups rotate one position along that list, so
    every corrupted image owns captions generated for another corrupted image.
    """
    n = spec.num_samples
    m = spec.captions_per_image
    n_corrupt = math.floor(spec.mismatch_rate * n)
    if n_corrupt == 1:
        raise InvalidInputError(
            "floor(eta*n) == 1: a single swap cannot avoid self-pairing; use 0 or >= 2")

    means = rng.normals(spec.num_classes, spec.latent_dim)
    proj_image = rng.normals(spec.latent_dim, spec.image_dim) / np.sqrt(spec.latent_dim)
    proj_text = rng.normals(spec.latent_dim, spec.text_dim) / np.sqrt(spec.latent_dim)

    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.samples_per_class)
    latents = means[labels] + LATENT_SPREAD * rng.normals(n, spec.latent_dim)

    sigma = spec.feature_noise_sigma
    image_features = latents @ proj_image + sigma * rng.normals(n, spec.image_dim)
    text_features = np.repeat(latents, m, axis=0) @ proj_text + sigma * rng.normals(n * m, spec.text_dim)

    pairing = np.arange(n * m, dtype=np.int64).reshape(n, m)
    corrupted = np.zeros(n, dtype=bool)
    perm = rng.permutation(n)
    if n_corrupt >= 2:
        cycle = perm[:n_corrupt]
        source = np.roll(cycle, -1)  # image cycle[j] takes the captions of cycle[j+1]
        pairing[cycle] = pairing[source]
        corrupted[cycle] = True

    return PairedDataset(image_features=image_features, text_features=text_features,
                         pairing=pairing, class_labels=labels, corrupted=corrupted)


def replay_generator_internals(spec: SyntheticSpec, seed: int):
    """Re-derive the latent structure a generate(spec, RngState(seed)) call
    used, without rebuilding the dataset. Returns (means, proj_image,
    proj_text, latents). Relies on the documented RNG consumption order."""
    rng = RngState(seed)
    means = rng.normals(spec.num_classes, spec.latent_dim)
    proj_image = rng.normals(spec.latent_dim, spec.image_dim) / np.sqrt(spec.latent_dim)
    proj_text = rng.normals(spec.latent_dim, spec.text_dim) / np.sqrt(spec.latent_dim)
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.samples_per_class)
    latents = means[labels] + LATENT_SPREAD * rng.normals(spec.num_samples, spec.latent_dim)
    return means, proj_image, proj_text, latents


def select_captions(ds: PairedDataset, rng: RngState) -> np.ndarray:
    """One caption row index per image, uniform over its candidates."""
    m = ds.captions_per_image
    if m == 1:
        return ds.pairing[:, 0].copy()
    slots = np.fromiter((rng.randint(m) for _ in range(ds.num_samples)),
                        dtype=np.int64, count=ds.num_samples)
    return ds.pairing[np.arange(ds.num_samples), slots]


def take_subset(ds: PairedDataset, image_idx: np.ndarray) -> PairedDataset:
    """New dataset holding only the given images and the captions they own."""
    image_idx = np.asarray(image_idx, dtype=np.int64)
    cap_rows = ds.pairing[image_idx].ravel()
    remap = np.full(ds.text_features.shape[0], -1, dtype=np.int64)
    remap[cap_rows] = np.arange(cap_rows.size, dtype=np.int64)
    return PairedDataset(
        image_features=ds.image_features[image_idx].copy(),
        text_features=ds.text_features[cap_rows].copy(),
        pairing=remap[ds.pairing[image_idx]],
        class_labels=ds.class_labels[image_idx].copy(),
        corrupted=ds.corrupted[image_idx].copy(),
    )


def save_pairs(ds: PairedDataset, path) -> None:
    n = ds.num_samples
    m = ds.captions_per_image
    header = struct.pack("<4sIIIIII", _MAGIC, _VERSION, n, m,
                         ds.image_features.shape[1], ds.text_features.shape[1],
                         ds.num_classes)
    blob = bytearray(header)
    blob += ds.image_features.astype("<f8").tobytes()
    blob += ds.text_features.astype("<f8").tobytes()
    blob += ds.pairing.astype("<u4").tobytes()
    blob += ds.class_labels.astype("<u4").tobytes()
    blob += ds.corrupted.astype("<u1").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_pairs(path) -> PairedDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise BadMagicError(f"{path}: expected magic {_MAGIC!r}")
    if len(raw) < 28:
        raise TruncatedFileError(f"{path}: header incomplete")
    _, version, n, m, image_dim, text_dim, num_classes = struct.unpack_from("<4sIIIIII", raw)
    if version != _VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {_VERSION}")
    if max(n, m, image_dim, text_dim, num_classes) > _MAX_COUNT:
        raise DimensionOverflowError(f"{path}: header count exceeds {_MAX_COUNT}")
    sizes = (n * image_dim * 8, n * m * text_dim * 8, n * m * 4, n * 4, n)
    expected = 28 + sum(sizes)
    if len(raw) < expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(raw) - 28} bytes, header promises {expected - 28}")
    off = 28
    image_features = np.frombuffer(raw, "<f8", n * image_dim, off).reshape(n, image_dim)
    off += sizes[0]
    text_features = np.frombuffer(raw, "<f8", n * m * text_dim, off).reshape(n * m, text_dim)
    off += sizes[1]
    pairing = np.frombuffer(raw, "<u4", n * m, off).astype(np.int64).reshape(n, m)
    off += sizes[2]
    labels = np.frombuffer(raw, "<u4", n, off).astype(np.int64)
    off += sizes[3]
    corrupted = np.frombuffer(raw, "<u1", n, off).astype(bool)
    return PairedDataset(image_features=image_features.astype(np.float64),
                         text_features=text_features.astype(np.float64),
                         pairing=pairing, class_labels=labels, corrupted=corrupted)
