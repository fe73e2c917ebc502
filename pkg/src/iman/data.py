"""Multi-modal patient records: single samples and columnar cohorts."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DimensionError

MODALITIES = ("ebv", "normal", "t1", "t1c", "t2")
FIELD_MODALITIES = ("ebv", "normal")
IMAGE_MODALITIES = ("t1", "t1c", "t2")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PatientSample:
    sample_id: int
    ebv: np.ndarray
    normal: np.ndarray
    images: tuple  # one [C,H,W] array per image modality, MODALITIES order
    present: tuple  # one bool per modality
    label: int

    def modality(self, name: str) -> np.ndarray:
        if name in FIELD_MODALITIES:
            return getattr(self, name)
        return self.images[IMAGE_MODALITIES.index(name)]


@dataclass
class Cohort:
    """Column-oriented collection of samples.

    ``images`` is ``[n, 3, C, H, W]`` with the image modalities stacked in
    ``IMAGE_MODALITIES`` order; ``present`` is ``[n, 5]`` booleans.
    """

    sample_ids: np.ndarray
    ebv: np.ndarray
    normal: np.ndarray
    images: np.ndarray
    present: np.ndarray
    labels: np.ndarray
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.ebv = np.asarray(self.ebv, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.images = np.asarray(self.images, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.sample_ids)
        if self.split is None:
            self.split = np.full(n, "train", dtype=object)
        else:
            self.split = np.asarray(self.split, dtype=object)
        for name in ("ebv", "normal", "images", "present", "labels", "split"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"cohort column {name!r} has {len(getattr(self, name))} rows, expected {n}")
        if self.images.ndim != 5 or self.images.shape[1] != len(IMAGE_MODALITIES):
            raise DimensionError(f"images must be [n, 3, C, H, W], got {self.images.shape}")
        if self.present.shape != (n, len(MODALITIES)):
            raise DimensionError(f"present must be [n, 5], got {self.present.shape}")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[2:]

    @property
    def field_dims(self) -> tuple:
        return self.ebv.shape[1], self.normal.shape[1]

    def subset(self, index) -> "Cohort":
        index = np.asarray(index)
        return Cohort(
            self.sample_ids[index],
            self.ebv[index],
            self.normal[index],
            self.images[index],
            self.present[index],
            self.labels[index],
            self.split[index],
        )

    def split_subset(self, name: str) -> "Cohort":
        return self.subset(np.flatnonzero(self.split == name))

    def sample(self, i: int) -> PatientSample:
        return PatientSample(
            sample_id=int(self.sample_ids[i]),
            ebv=self.ebv[i].copy(),
            normal=self.normal[i].copy(),
            images=tuple(self.images[i, j].copy() for j in range(len(IMAGE_MODALITIES))),
            present=tuple(bool(b) for b in self.present[i]),
            label=int(self.labels[i]),
        )

    def with_columns(self, **changes) -> "Cohort":
        return replace(self, **changes)

    @classmethod
    def from_samples(cls, samples, split=None) -> "Cohort":
        samples = list(samples)
        if not samples:
            raise DimensionError("cannot build a cohort from zero samples")
        return cls(
            sample_ids=[s.sample_id for s in samples],
            ebv=np.stack([s.ebv for s in samples]),
            normal=np.stack([s.normal for s in samples]),
            images=np.stack([np.stack(s.images) for s in samples]),
            present=np.array([s.present for s in samples], dtype=bool),
            labels=[s.label for s in samples],
            split=split,
        )

    def equals(self, other: "Cohort") -> bool:
        return (
            np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.ebv, other.ebv)
            and np.array_equal(self.normal, other.normal)
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.labels, other.labels)
            and list(self.split) == list(other.split)
        )
