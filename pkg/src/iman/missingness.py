"""Missing-modality protocol: the binary missingness table, masking, and
presence-conditioned prompt tokens."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import MODALITIES, Cohort, PatientSample
from .exceptions import ConstraintError, DimensionError, ParameterError
from .numerics import Tensor, make_rng, where

__all__ = [
    "MissingnessTable",
    "PresencePattern",
    "PromptBank",
    "build_table",
    "missing_rate",
    "apply_missing",
    "mask_cohort",
    "init_prompt_bank",
    "select_prompts",
    "select_prompts_batch",
    "read_table_csv",
    "write_table_csv",
]

TABLE_HEADER = ("sample_id",) + MODALITIES


@dataclass(frozen=True)
class MissingnessTable:
    """``bits[i, k] == 1`` means modality ``k`` is absent for sample ``i``."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise DimensionError(f"missingness table must be 2-D, got shape {bits.shape}")
        if np.any(bits > 1):
            raise ConstraintError("missingness table entries must be 0 or 1")
        if bits.shape[0] and np.any(bits.sum(axis=1) == bits.shape[1]):
            row = int(np.flatnonzero(bits.sum(axis=1) == bits.shape[1])[0])
            raise ConstraintError(f"row {row} marks every modality absent")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def n_rows(self) -> int:
        return self.bits.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.bits.shape[1]

    def column_counts(self) -> np.ndarray:
        return self.bits.sum(axis=0).astype(np.int64)

    def pattern(self, i: int) -> "PresencePattern":
        return PresencePattern(tuple(bool(b == 0) for b in self.bits[i]))

    @classmethod
    def zeros(cls, n: int, m: int = len(MODALITIES)) -> "MissingnessTable":
        return cls(np.zeros((n, m), dtype=np.uint8))


@dataclass(frozen=True)
class PresencePattern:
    bits: tuple  # True = present

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))
        if not any(self.bits):
            raise ConstraintError("a presence pattern needs at least one present modality")

    @classmethod
    def all_present(cls, m: int = len(MODALITIES)) -> "PresencePattern":
        return cls((True,) * m)

    @classmethod
    def from_absent(cls, absent_bits) -> "PresencePattern":
        return cls(tuple(not bool(b) for b in absent_bits))

    def absent_bits(self) -> tuple:
        return tuple(int(not b) for b in self.bits)


def build_table(n: int, per_modality_rates, seed) -> MissingnessTable:
    """Random table whose column ``k`` holds exactly ``round(n * rate_k)`` ones.

    Rows for each column are drawn uniformly without replacement.  Any row
    that ends up with every modality absent is re-placed: one of its absent
    marks (a uniformly drawn column among those with a spare row) moves to a
    uniformly drawn row that still has two or more present modalities, which keeps every column count fixed.  ``seed`` is an int or a
    ``numpy.random.Generator``.
    """
    rates = np.asarray(per_modality_rates, dtype=np.float64)
    if n < 1:
        raise ParameterError(f"table needs at least one row, got n={n}")
    if rates.ndim != 1 or rates.size < 1:
        raise ParameterError("per_modality_rates must be a non-empty vector")
    if np.any((rates < 0) | (rates > 1)) or not np.all(np.isfinite(rates)):
        raise ParameterError(f"rates must lie in [0, 1], got {rates.tolist()}")
    m = rates.size
    counts = [int(round(n * r)) for r in rates]
    total, bound = sum(counts), n * (m - 1)
    if total > bound:
        raise ConstraintError(
            f"infeasible rates: {total} absent entries exceed the row bound "
            f"n*(M-1) = {bound} needed to keep one modality per row"
        )
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(int(seed), "mask")
    bits = np.zeros((n, m), dtype=np.uint8)
    for k, c in enumerate(counts):
        if c:
            bits[rng.choice(n, size=c, replace=False), k] = 1
    while True:
        full = np.flatnonzero(bits.sum(axis=1) == m)
        if full.size == 0:
            break
        for r in full:
            # feasibility guarantees some row keeps two or more modalities
            spare = (bits == 0) & (bits.sum(axis=1, keepdims=True) <= m - 2)
            cols = np.flatnonzero(spare.any(axis=0))
            k = int(cols[rng.integers(cols.size)])
            donors = np.flatnonzero(spare[:, k])
            r2 = int(donors[rng.integers(donors.size)])
            bits[r, k] = 0
            bits[r2, k] = 1
    return MissingnessTable(bits)


def missing_rate(table: MissingnessTable, k: int) -> float:
    if not 0 <= k < table.n_modalities:
        raise ParameterError(f"modality index {k} outside 0..{table.n_modalities - 1}")
    return float(table.bits[:, k].sum()) / table.n_rows


def apply_missing(sample: PatientSample, absent_bits) -> PatientSample:
    """Mask the modalities flagged in ``absent_bits`` (a table row, 1 = absent).

    Absent values are zeroed and their presence bits cleared; the field
    tokenizer substitutes its placeholder token for absent fields.
    """
    absent = tuple(bool(b) for b in np.asarray(absent_bits).reshape(-1))
    if len(absent) != len(MODALITIES):
        raise DimensionError(f"mask row has {len(absent)} entries, expected {len(MODALITIES)}")
    present = tuple(p and not a for p, a in zip(sample.present, absent))
    if not any(present):
        raise ConstraintError(f"masking sample {sample.sample_id} would leave no modality")
    ebv = sample.ebv if present[0] else np.zeros_like(sample.ebv)
    normal = sample.normal if present[1] else np.zeros_like(sample.normal)
    images = tuple(
        img if present[2 + j] else np.zeros_like(img) for j, img in enumerate(sample.images)
    )
    return replace(sample, ebv=ebv, normal=normal, images=images, present=present)


def mask_cohort(cohort: Cohort, table: MissingnessTable) -> Cohort:
    """Vectorized :func:`apply_missing` over all rows of a cohort."""
    if table.n_rows != len(cohort):
        raise DimensionError(f"table has {table.n_rows} rows for a cohort of {len(cohort)}")
    present = cohort.present & (table.bits == 0)
    if np.any(~present.any(axis=1)):
        row = int(np.flatnonzero(~present.any(axis=1))[0])
        raise ConstraintError(f"masking row {row} would leave no modality")
    return cohort.with_columns(
        ebv=np.where(present[:, [0]], cohort.ebv, 0.0),
        normal=np.where(present[:, [1]], cohort.normal, 0.0),
        images=np.where(present[:, 2:, None, None, None], cohort.images, 0.0),
        present=present,
    )


@dataclass
class PromptBank:
    present: Tensor  # [M, prompt_len, d_model]
    absent: Tensor  # [M, prompt_len, d_model]

    def __post_init__(self):
        if self.present.shape != self.absent.shape or self.present.ndim != 3:
            raise DimensionError(
                f"prompt blocks must share a [M, L, d] shape, got {self.present.shape} and {self.absent.shape}"
            )

    @property
    def n_modalities(self) -> int:
        return self.present.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.present.shape[1]

    def tensors(self) -> dict:
        return {"present": self.present, "absent": self.absent}


def init_prompt_bank(
    m: int, prompt_len: int, d_model: int, rng: np.random.Generator, std: float = 0.02
) -> PromptBank:
    return PromptBank(
        present=Tensor(rng.normal(0.0, std, (m, prompt_len, d_model))),
        absent=Tensor(rng.normal(0.0, std, (m, prompt_len, d_model))),
    )


def select_prompts_batch(present_bits, bank: PromptBank) -> Tensor:
    """``[B, M]`` presence booleans -> ``[B, M*prompt_len, d_model]`` prompts."""
    bits = np.asarray(present_bits, dtype=bool)
    if bits.ndim != 2 or bits.shape[1] != bank.n_modalities:
        raise DimensionError(f"presence bits {bits.shape} do not match {bank.n_modalities} modalities")
    B = bits.shape[0]
    M, L, d = bank.present.shape
    chosen = where(bits[:, :, None, None], bank.present, bank.absent)  # [B, M, L, d]
    return chosen.reshape(B, M * L, d)


def select_prompts(pattern: PresencePattern, bank: PromptBank) -> Tensor:
    out = select_prompts_batch(np.array([pattern.bits], dtype=bool), bank)
    return out.reshape(out.shape[1:])


def write_table_csv(path, table: MissingnessTable, sample_ids=None) -> None:
    ids = range(table.n_rows) if sample_ids is None else [int(s) for s in sample_ids]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for sid, row in zip(ids, table.bits):
            w.writerow([sid, *(int(b) for b in row)])


def read_table_csv(path):
    """Returns ``(sample_ids, MissingnessTable)``."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TABLE_HEADER:
        raise ConstraintError(f"{path}: expected header {','.join(TABLE_HEADER)}")
    ids = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
    bits = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.uint8).reshape(
        len(ids), len(MODALITIES)
    )
    return ids, MissingnessTable(bits)

