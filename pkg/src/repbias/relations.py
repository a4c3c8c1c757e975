"""Annotation tables and the per-pair cosine distributions mined from them."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import DegenerateAttributeWarning, NoSamples, ShapeMismatch, UnknownAttribute, ValidationError
from .tensor import ZERO_NORM_TOL

DEFAULT_BINS = 64


@dataclass
class AnnotationTable:
    """Ground truth in {-1, +1}; +1 always means the attribute is present."""

    sample_ids: list[str]
    names: list[str]
    values: np.ndarray
    flips: tuple[bool, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.values.shape != (len(self.sample_ids), len(self.names)):
            raise ShapeMismatch(f"values {self.values.shape} vs {len(self.sample_ids)} ids x {len(self.names)} names")
        if not np.all(np.isin(self.values, (-1, 1))):
            raise ValidationError("annotation table values must be -1 or +1")
        if not self.flips:
            self.flips = (False,) * len(self.names)

    def __len__(self):
        return len(self.sample_ids)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownAttribute(f"unknown attribute {name!r}") from None

    def subset(self, rows) -> "AnnotationTable":
        rows = np.asarray(rows, dtype=np.int64)
        return AnnotationTable([self.sample_ids[r] for r in rows], list(self.names), self.values[rows], self.flips)

    def cell_counts(self, i: int, j: int) -> dict[tuple[int, int], int]:
        a, b = self.values[:, i], self.values[:, j]
        return {(s, t): int(np.sum((a == s) & (b == t))) for s in (1, -1) for t in (1, -1)}


def normalize_annotations(raw, names: Sequence[str], sample_ids: Sequence[str] | None = None,
                          flip: Sequence[bool] | None = None, threshold: float = 0.5) -> AnnotationTable:
    """Binarize and sign-normalize raw annotations.

    A column whose values are all -1/+1 is kept as is; any other column is
    treated as continuous and mapped to sign(y - threshold) with sign(0) = -1.
    Flipped columns are negated after binarization.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != len(names):
        raise ShapeMismatch(f"raw annotations {raw.shape} vs {len(names)} names")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("annotations contain NaN or Inf")
    ids = [str(k) for k in range(raw.shape[0])] if sample_ids is None else [str(s) for s in sample_ids]
    flips = tuple(bool(f) for f in flip) if flip is not None else (False,) * len(names)
    if len(flips) != len(names):
        raise ShapeMismatch("one flip flag per attribute required")
    out = np.empty(raw.shape, dtype=np.int64)
    for a in range(raw.shape[1]):
        col = raw[:, a]
        if np.all(np.isin(col, (-1.0, 1.0))):
            out[:, a] = col.astype(np.int64)
        else:
            out[:, a] = np.where(col - threshold > 0, 1, -1)
        if flips[a]:
            out[:, a] = -out[:, a]
        if raw.shape[0] and np.all(out[:, a] == out[0, a]):
            warnings.warn(f"attribute {names[a]!r} has a single value; it cannot be mined",
                          DegenerateAttributeWarning, stacklevel=2)
    return AnnotationTable(ids, list(names), out, flips)


def read_annotations_csv(path, flip=None, threshold: float = 0.5) -> AnnotationTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if line.strip()))
    if not rows or rows[0][0] != "sample_id":
        raise ValidationError(f"{path}: header must start with 'sample_id'")
    names = rows[0][1:]
    try:
        raw = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if raw.size == 0:
        raw = raw.reshape(0, len(names))
    return normalize_annotations(raw, names, [row[0] for row in rows[1:]], flip, threshold)


def annotations_to_csv(table: AnnotationTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", *table.names])
    for sid, row in zip(table.sample_ids, table.values):
        w.writerow([sid, *[int(v) for v in row]])
    return buf.getvalue()


def write_annotations_csv(path, table: AnnotationTable) -> None:
    atomic_write_text(Path(path), annotations_to_csv(table))


# -- pair distributions -------------------------------------------------------


def filter_pair_samples(table: AnnotationTable, i: int, j: int) -> np.ndarray:
    """Row indices where attribute i or attribute j is present."""
    if i == j:
        raise ValidationError("pair needs two distinct attributes")
    keep = np.flatnonzero((table.values[:, i] == 1) | (table.values[:, j] == 1))
    if keep.size == 0:
        raise NoSamples(f"no sample has {table.names[i]!r} or {table.names[j]!r} present")
    return keep


def bin_edges(bins: int) -> np.ndarray:
    return -1.0 + 2.0 * np.arange(bins + 1) / bins


def histogram(values, bins: int) -> np.ndarray:
    """Counts over ``bins`` uniform bins of [-1, 1]; the last bin is closed."""
    edges = bin_edges(bins)
    idx = np.searchsorted(edges[1:bins], np.asarray(values, dtype=np.float64), side="right")
    return np.bincount(idx, minlength=bins).astype(np.int64)


@dataclass
class PairDistribution:
    pair: tuple[int, int]
    counts: np.ndarray
    sample_count: int
    mean_cosine: float
    skipped_count: int
    cosines: np.ndarray

    @property
    def bins(self) -> int:
        return len(self.counts)

    def to_csv(self) -> str:
        lines = ["bin_lower_edge,count"]
        for e, c in zip(bin_edges(self.bins)[:-1], self.counts):
            lines.append(f"{float(e)!r},{int(c)}")
        return "\n".join(lines) + "\n"


def row_cosines(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cosine of two (rows, units) matrices and a mask of usable rows."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= ZERO_NORM_TOL) & (nb >= ZERO_NORM_TOL)
    out = np.zeros(a.shape[0])
    au = a[ok] / na[ok, None]
    bu = b[ok] / nb[ok, None]
    out[ok] = np.clip(np.einsum("ij,ij->i", au, bu), -1.0, 1.0)
    return out, ok


def mine_pair(v_i, v_j, subset=None, bins: int = DEFAULT_BINS, pair: tuple[int, int] = (0, 1)) -> PairDistribution:
    """Histogram of per-image cosines between the two attributes' inference vectors.

    ``v_i`` and ``v_j`` hold one vector per image (leading axis); ``subset``
    picks the rows to use. Rows where either vector has zero norm are skipped.
    """
    if bins < 2:
        raise ValidationError("need at least 2 bins")
    v_i = np.asarray(v_i, dtype=np.float64)
    v_j = np.asarray(v_j, dtype=np.float64)
    if v_i.shape != v_j.shape:
        raise ShapeMismatch(f"{v_i.shape} vs {v_j.shape}")
    rows = np.arange(v_i.shape[0]) if subset is None else np.asarray(subset, dtype=np.int64)
    a = v_i[rows].reshape(len(rows), -1)
    b = v_j[rows].reshape(len(rows), -1)
    cos, ok = row_cosines(a, b)
    used = cos[ok]
    if used.size == 0:
        raise NoSamples(f"pair {pair}: every sample has a zero-norm inference vector")
    mean = math.fsum(used.tolist()) / used.size
    return PairDistribution(tuple(pair), histogram(used, bins), int(used.size),
                            min(1.0, max(-1.0, mean)), int((~ok).sum()), used)
