"""On-disk dataset container.

Layout of a dataset directory::

    meta.csv            sample_id,label,split,<modality>_present...
    table.csv           missingness table (sample_id + one 0/1 column per modality)
    SAMPLE_<id>.bin     b"IMSM", uint32 version, uint32 modality count, then per
                        modality uint32 ndim + ndim uint32 sizes; followed by
                        little-endian float64 values, modalities in fixed order
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .data import IMAGE_MODALITIES, MODALITIES, Cohort
from .exceptions import ConfigurationError
from .missingness import MissingnessTable, read_table_csv, write_table_csv

__all__ = ["write_dataset", "read_dataset", "encode_sample", "decode_sample", "META_HEADER"]

SAMPLE_MAGIC = b"IMSM"
SAMPLE_VERSION = 1
META_HEADER = ("sample_id", "label", "split") + tuple(f"{m}_present" for m in MODALITIES)


def encode_sample(arrays) -> bytes:
    """Serialize one sample's modality arrays (in ``MODALITIES`` order)."""
    parts = [SAMPLE_MAGIC, struct.pack("<II", SAMPLE_VERSION, len(arrays))]
    for a in arrays:
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_sample(raw: bytes) -> list:
    if raw[:4] != SAMPLE_MAGIC:
        raise ConfigurationError("sample blob does not start with IMSM")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != SAMPLE_VERSION:
        raise ConfigurationError(f"unsupported sample blob version {version}")
    pos = 12
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shapes.append(struct.unpack_from(f"<{ndim}I", raw, pos))
        pos += 4 * ndim
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape))
        pos += 8 * size
    if pos != len(raw):
        raise ConfigurationError("trailing bytes in sample blob")
    return arrays


def write_dataset(directory, cohort: Cohort, table: MissingnessTable | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    if table is None:
        table = MissingnessTable((~cohort.present).astype(np.uint8))
    with open(out / "meta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_HEADER)
        for i in range(len(cohort)):
            w.writerow(
                [int(cohort.sample_ids[i]), int(cohort.labels[i]), cohort.split[i]]
                + [int(b) for b in cohort.present[i]]
            )
    write_table_csv(out / "table.csv", table, cohort.sample_ids)
    for i in range(len(cohort)):
        arrays = [cohort.ebv[i], cohort.normal[i]] + [cohort.images[i, j] for j in range(len(IMAGE_MODALITIES))]
        (out / f"SAMPLE_{int(cohort.sample_ids[i])}.bin").write_bytes(encode_sample(arrays))
    return out


def read_dataset(directory):
    """Returns ``(cohort, table)``."""
    src = Path(directory)
    meta_path = src / "meta.csv"
    if not meta_path.exists():
        raise ConfigurationError(f"{src} is not a dataset directory (missing meta.csv)")
    with open(meta_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != META_HEADER:
        raise ConfigurationError(f"{meta_path}: unexpected header")
    rows = rows[1:]
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    samples = [decode_sample((src / f"SAMPLE_{sid}.bin").read_bytes()) for sid in ids]
    cohort = Cohort(
        sample_ids=ids,
        ebv=np.stack([s[0] for s in samples]),
        normal=np.stack([s[1] for s in samples]),
        images=np.stack([np.stack(s[2:]) for s in samples]),
        present=np.array([[r[3 + k] == "1" for k in range(len(MODALITIES))] for r in rows], dtype=bool),
        labels=np.array([int(r[1]) for r in rows]),
        split=np.array([r[2] for r in rows], dtype=object),
    )
    table_ids, table = read_table_csv(src / "table.csv")
    if not np.array_equal(table_ids, ids):
        raise ConfigurationError(f"{src}: table.csv rows do not match meta.csv")
    return cohort, table
