"""Synthetic paired datasets, teacher features, and their file formats.

Pairs are two linear views of a shared class-conditional latent, plus
isotropic noise, so the class structure is recoverable from either
modality alone and the pairing is exact by construction. The teacher is
a frozen random tanh network over the text view whose output is PCA
reduced, standing in for any pretrained external encoder.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DomainError

DATASET_MAGIC = b"PROTO-DATA1"
TEACHER_MAGIC = b"PROTO-TEACH1"


@dataclass
class PairedDataset:
    """Aligned image/text rows with labels kept for evaluation only."""

    x_image: np.ndarray
    x_text: np.ndarray
    labels: np.ndarray
    n_classes: int
    seed: int = -1

    @property
    def n_samples(self):
        return self.x_image.shape[0]


@dataclass
class TeacherCache:
    """Frozen per-sample teacher features, already PCA reduced."""

    features: np.ndarray
    source_dim: int
    basis: np.ndarray


def generate_synthetic(
    n_classes, per_class, d_latent, d_image, d_text, noise_sigma, seed,
    text_noise_scale=1.0, d_style=0,
):
    """Draw a balanced paired dataset from a shared latent mixture.

    The latent of a sample has two blocks. The first d_latent dimensions
    carry its class center plus within-class spread. The optional d_style
    dimensions are unit Gaussians drawn per sample and shared by both
    modalities: appearance detail that a pair agrees on but that says
    nothing about the class. text_noise_scale multiplies the text-side
    observation noise only, making captions individually noisier
    observations than images.
    """
    if min(n_classes, per_class, d_latent, d_image, d_text) < 1:
        raise ConfigError("dataset dimensions and counts must be positive")
    if d_style < 0:
        raise ConfigError(f"d_style must be nonnegative, got {d_style}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    if text_noise_scale < 0:
        raise ConfigError(
            f"text_noise_scale must be nonnegative, got {text_noise_scale}"
        )
    rng = np.random.default_rng(seed)
    m = n_classes * per_class
    d_total = d_latent + d_style
    centers = rng.standard_normal((n_classes, d_latent))
    map_image = rng.standard_normal((d_total, d_image)) / np.sqrt(d_total)
    map_text = rng.standard_normal((d_total, d_text)) / np.sqrt(d_total)
    labels = np.repeat(np.arange(n_classes, dtype=np.uint32), per_class)
    latents = np.empty((m, d_total))
    latents[:, :d_latent] = (
        centers[labels] + noise_sigma * rng.standard_normal((m, d_latent))
    )
    if d_style:
        latents[:, d_latent:] = rng.standard_normal((m, d_style))
    x_image = latents @ map_image + noise_sigma * rng.standard_normal((m, d_image))
    x_text = latents @ map_text + (
        text_noise_scale * noise_sigma * rng.standard_normal((m, d_text))
    )
    return PairedDataset(x_image, x_text, labels, n_classes, seed)


def rms(x):
    """Root mean square over every entry."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("rms of an empty array is undefined")
    return float(np.sqrt(np.mean(x * x)))


def inject_modality_gap(ds, gap_vector=None, gap_norm=None, seed=0):
    """Shift every text row by a constant offset vector.

    Pass either an explicit gap_vector or a gap_norm, in which case a
    random unit direction scaled to that norm is drawn from seed.
    """
    if (gap_vector is None) == (gap_norm is None):
        raise ConfigError("provide exactly one of gap_vector or gap_norm")
    d_text = ds.x_text.shape[1]
    if gap_vector is None:
        direction = np.random.default_rng(seed).standard_normal(d_text)
        direction /= np.linalg.norm(direction)
        gap_vector = float(gap_norm) * direction
    gap_vector = np.asarray(gap_vector, dtype=np.float64)
    if gap_vector.shape != (d_text,):
        raise ConfigError(
            f"gap vector shape {gap_vector.shape} does not match text width {d_text}"
        )
    return PairedDataset(
        x_image=ds.x_image,
        x_text=ds.x_text + gap_vector,
        labels=ds.labels,
        n_classes=ds.n_classes,
        seed=ds.seed,
    )


def augment(x, sigma, rng):
    """Additive isotropic Gaussian noise; sigma zero is the identity."""
    if sigma < 0:
        raise DomainError(f"augmentation sigma must be nonnegative, got {sigma}")
    if sigma == 0.0:
        return x
    return x + sigma * rng.standard_normal(x.shape)


def pca_reduce(x, d_out):
    """Project centered rows onto the top principal directions.

    Returns (reduced, basis) with basis columns sign-fixed so the entry
    of largest magnitude is positive, making the result deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise DataError(f"pca needs at least 2 rows, got {n}")
    if not 1 <= d_out <= d:
        raise ConfigError(f"pca output width must lie in [1, {d}], got {d_out}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:d_out]
    basis = eigvecs[:, order]
    flips = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(d_out)])
    flips[flips == 0.0] = 1.0
    basis = basis * flips
    return centered @ basis, basis


def build_teacher_cache(ds, d_reduced, seed, hidden_width=64, raw_dim=64, gain=6.0):
    """Run a frozen random saturating tanh MLP over text inputs and PCA-reduce it.

    Nothing inside the map is fitted to the data; only the final PCA
    reduction is, mirroring offline post-processing of cached features.
    The gain drives both tanh layers toward saturation: nearby inputs
    still land on the same activation pattern, so grouping structure
    survives, but the coordinate geometry is heavily warped relative to
    the inputs, as with any foreign frozen embedding. Inputs far outside
    the map's operating range pin every unit and wash the features out.
    """
    if d_reduced > raw_dim:
        raise ConfigError(
            f"teacher reduced width {d_reduced} exceeds raw width {raw_dim}"
        )
    rng = np.random.default_rng(seed)
    d_text = ds.x_text.shape[1]
    w1 = rng.standard_normal((d_text, hidden_width)) / np.sqrt(d_text)
    b1 = 0.1 * rng.standard_normal((1, hidden_width))
    w2 = rng.standard_normal((hidden_width, raw_dim)) / np.sqrt(hidden_width)
    b2 = 0.1 * rng.standard_normal((1, raw_dim))
    raw = np.tanh(gain * (np.tanh(gain * (ds.x_text @ w1 + b1)) @ w2 + b2))
    reduced, basis = pca_reduce(raw, d_reduced)
    return TeacherCache(features=reduced, source_dim=raw_dim, basis=basis)


def class_text_means(ds, indices=None):
    """Per-class mean text rows, the canonical class descriptions."""
    if indices is None:
        indices = np.arange(ds.n_samples)
    out = np.zeros((ds.n_classes, ds.x_text.shape[1]))
    labels = ds.labels[indices]
    for k in range(ds.n_classes):
        members = indices[labels == k]
        if members.size == 0:
            raise DataError(f"class {k} has no samples to describe")
        out[k] = ds.x_text[members].mean(axis=0)
    return out


def split_indices(n_samples, test_fraction, seed):
    """Deterministic disjoint train/test index split, both sorted."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(
            f"test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )
    n_test = int(round(n_samples * test_fraction))
    n_test = min(max(n_test, 1), n_samples - 1)
    perm = np.random.default_rng(seed).permutation(n_samples)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def take(ds, indices):
    """Subset a dataset, keeping pairing and labels aligned."""
    indices = np.asarray(indices)
    return PairedDataset(
        x_image=ds.x_image[indices],
        x_text=ds.x_text[indices],
        labels=ds.labels[indices],
        n_classes=ds.n_classes,
        seed=ds.seed,
    )


def save_dataset(path, ds):
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(
            struct.pack(
                "<IIII",
                ds.n_samples,
                ds.x_image.shape[1],
                ds.x_text.shape[1],
                ds.n_classes,
            )
        )
        fh.write(np.ascontiguousarray(ds.x_image, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.x_text, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(DATASET_MAGIC):
        raise DataError(f"{path} is not a dataset file")
    pos = len(DATASET_MAGIC)
    m, d_image, d_text, n_classes = struct.unpack_from("<IIII", blob, pos)
    pos += 16
    want = m * (d_image + d_text) * 8 + m * 4
    if len(blob) - pos != want:
        raise DataError(f"{path} payload size mismatch")
    x_image = np.frombuffer(blob, "<f8", m * d_image, pos).reshape(m, d_image)
    pos += m * d_image * 8
    x_text = np.frombuffer(blob, "<f8", m * d_text, pos).reshape(m, d_text)
    pos += m * d_text * 8
    labels = np.frombuffer(blob, "<u4", m, pos)
    if labels.size and labels.max() >= n_classes:
        raise DataError(f"{path} holds a label outside [0, {n_classes})")
    return PairedDataset(
        x_image=x_image.astype(np.float64),
        x_text=x_text.astype(np.float64),
        labels=labels.astype(np.uint32),
        n_classes=n_classes,
    )


def save_teacher_cache(path, cache):
    m, d_reduced = cache.features.shape
    with open(path, "wb") as fh:
        fh.write(TEACHER_MAGIC)
        fh.write(struct.pack("<II", m, d_reduced))
        fh.write(np.ascontiguousarray(cache.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cache.basis, dtype="<f8").tobytes())


def load_teacher_cache(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(TEACHER_MAGIC):
        raise DataError(f"{path} is not a teacher cache file")
    pos = len(TEACHER_MAGIC)
    m, d_reduced = struct.unpack_from("<II", blob, pos)
    pos += 8
    feat_bytes = m * d_reduced * 8
    basis_bytes = len(blob) - pos - feat_bytes
    if basis_bytes < 0 or basis_bytes % (d_reduced * 8) != 0:
        raise DataError(f"{path} payload size mismatch")
    features = np.frombuffer(blob, "<f8", m * d_reduced, pos).reshape(m, d_reduced)
    pos += feat_bytes
    d_raw = basis_bytes // (d_reduced * 8)
    basis = np.frombuffer(blob, "<f8", d_raw * d_reduced, pos).reshape(d_raw, d_reduced)
    return TeacherCache(
        features=features.astype(np.float64),
        source_dim=d_raw,
        basis=basis.astype(np.float64),
    )
