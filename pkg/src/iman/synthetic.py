"""Synthetic multi-modal cohorts with a planted latent signal.

A latent ``z`` decides the label (``z > 0``) and tints every modality: both
field vectors move along a fixed unit direction by ``signal_strength * z`` and
each image carries a centred Gaussian blob of peak ``signal_strength * z``.
Independent Gaussian noise of scale ``noise_scale`` is added everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IMAGE_MODALITIES, MODALITIES, Cohort
from .exceptions import ConfigurationError
from .numerics import make_rng

__all__ = ["SyntheticSpec", "gen_synthetic", "split_labels"]


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 600
    image_shape: tuple = (1, 32, 32)
    field_dims: tuple = (4, 19)
    signal_strength: float = 2.0
    noise_scale: float = 1.0
    seed: int = 0
    split_fractions: tuple = (0.70, 0.15, 0.15)
    blob_width: float = 0.15  # Gaussian sd as a fraction of the image side

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "field_dims", tuple(int(v) for v in self.field_dims))
        object.__setattr__(self, "split_fractions", tuple(float(v) for v in self.split_fractions))
        if self.n_samples < 10:
            raise ConfigurationError(f"n_samples must be >= 10, got {self.n_samples}")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0:
            raise ConfigurationError("split_fractions needs three nonnegative values")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split fractions sum to {sum(self.split_fractions)}, not 1")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be nonnegative")


def split_labels(n: int, fractions, rng: np.random.Generator) -> np.ndarray:
    """Random train/val/test assignment with sizes ``round(n * f)`` (test takes the rest)."""
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    names = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val), dtype=object)
    return names[rng.permutation(n)]


def _unit(rng, k):
    v = rng.normal(size=k)
    return v / np.linalg.norm(v)


def _blob(shape, width):
    C, H, W = shape
    r = np.arange(H) - (H - 1) / 2.0
    c = np.arange(W) - (W - 1) / 2.0
    sr, sc = width * H, width * W
    g = np.exp(-0.5 * ((r[:, None] / sr) ** 2 + (c[None, :] / sc) ** 2))
    return np.broadcast_to(g, (C, H, W))


def gen_synthetic(spec: SyntheticSpec) -> Cohort:
    """Generate a fully-present cohort with split labels.

    Labels are exactly balanced (``ceil(n/2)`` positives): ``|z|`` is
    half-normal and the sign comes from a random balanced permutation.
    """
    rng = make_rng(spec.seed, "data")
    n = spec.n_samples
    signs = np.where(np.arange(n) < (n + 1) // 2, 1.0, -1.0)[rng.permutation(n)]
    z = signs * np.abs(rng.normal(size=n))
    labels = (z > 0).astype(np.int64)
    s, eps = spec.signal_strength, spec.noise_scale

    d_ebv, d_normal = spec.field_dims
    u_ebv, u_normal = _unit(rng, d_ebv), _unit(rng, d_normal)
    ebv = s * z[:, None] * u_ebv + eps * rng.normal(size=(n, d_ebv))
    normal = s * z[:, None] * u_normal + eps * rng.normal(size=(n, d_normal))

    blob = _blob(spec.image_shape, spec.blob_width)
    images = np.empty((n, len(IMAGE_MODALITIES)) + spec.image_shape)
    for j in range(len(IMAGE_MODALITIES)):
        images[:, j] = s * z[:, None, None, None] * blob + eps * rng.normal(size=(n,) + spec.image_shape)

    split = split_labels(n, spec.split_fractions, rng)
    return Cohort(
        sample_ids=np.arange(n),
        ebv=ebv,
        normal=normal,
        images=images,
        present=np.ones((n, len(MODALITIES)), dtype=bool),
        labels=labels,
        split=split,
    )

