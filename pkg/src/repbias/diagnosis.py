"""KL divergences between annotated and mined relationships, and what they imply."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import BinMismatch, EmptyMode, IsolatedAttribute, NoSamples, ValidationError
from .groundtruth import LabelGaussian, RelationGraph
from .relations import AnnotationTable, PairDistribution

DEFAULT_SMOOTHING = 0.5
DEFAULT_KL_PERCENTILE = 75.0
NEAR_ZERO = 0.2
FAR_FROM_LABEL = 0.2


class Classification(str, Enum):
    WELL_LEARNED = "well_learned"
    BLIND_SPOT = "blind_spot"
    FAILURE_MODE = "failure_mode"


def smoothed_q(q: PairDistribution | np.ndarray, smoothing: float) -> np.ndarray:
    counts = np.asarray(q.counts if isinstance(q, PairDistribution) else q, dtype=np.float64)
    total = float(counts.sum())
    if total <= 0:
        raise NoSamples("empty mined distribution")
    return (counts + smoothing) / (total + len(counts) * smoothing)


def kl_pair(p, q: PairDistribution | np.ndarray, smoothing: float = DEFAULT_SMOOTHING) -> float:
    """KL(P || Q) in nats with additive smoothing of the Q counts.

    Bins with P_b = 0 contribute nothing. With ``smoothing=0`` a bin where
    P_b > 0 but Q_b = 0 gives ``inf``.
    """
    p = np.asarray(p, dtype=np.float64)
    counts = q.counts if isinstance(q, PairDistribution) else np.asarray(q)
    if p.shape != (len(counts),):
        raise BinMismatch(f"P has {p.size} bins, Q has {len(counts)}")
    if smoothing < 0:
        raise ValidationError("smoothing must be non-negative")
    qs = smoothed_q(counts, smoothing)
    pos = p > 0
    if np.any(qs[pos] == 0):
        return math.inf
    kl = float(np.sum(p[pos] * np.log(p[pos] / qs[pos])))
    return max(kl, 0.0)


def kl_attribute(pair_kls: Mapping[tuple[int, int], float], graph: RelationGraph, attr: int) -> float:
    """Average of KL over the labeled edges incident to ``attr`` (P(A_j|A_i) = 1/deg)."""
    edges = graph.incident(attr)
    if not edges:
        raise IsolatedAttribute(f"attribute {graph.names[attr]!r} has no labeled relationship")
    vals = [pair_kls[e.pair] for e in edges if e.pair in pair_kls]
    if not vals:
        raise IsolatedAttribute(f"attribute {graph.names[attr]!r} has no minable relationship")
    return math.fsum(vals) / len(vals)


def kl_gate(kls: Sequence[float], percentile: float = DEFAULT_KL_PERCENTILE) -> float:
    """KL value a pair must reach to count as "high"."""
    finite = [k for k in kls if math.isfinite(k)]
    if not finite:
        return math.inf if not kls else 0.0
    return float(np.percentile(np.asarray(sorted(finite)), percentile))


def classify_pair(mean_cosine: float, mu_label: float, kl: float, gate: float,
                  near_zero: float = NEAR_ZERO, far: float = FAR_FROM_LABEL) -> Classification:
    if not kl >= gate:
        return Classification.WELL_LEARNED
    off_label = abs(mean_cosine - mu_label) > far
    if abs(mean_cosine) < near_zero and off_label:
        return Classification.BLIND_SPOT
    if abs(mean_cosine) > near_zero and off_label:
        return Classification.FAILURE_MODE
    return Classification.WELL_LEARNED


@dataclass(frozen=True)
class FailureMode:
    """Annotation cell (Y_u* = a, Y_v* = b) expected to be mispredicted."""

    u: int
    a: int
    v: int
    b: int
    support: int

    @property
    def empty(self) -> bool:
        return self.support == 0


def extract_failure_mode(table: AnnotationTable, i: int, j: int, sign: float) -> FailureMode:
    """Pick the rarer of the two annotation cells that contradict the mined sign.

    A positive mined relation points at the opposite-sign cells, a negative one
    at the agreeing cells. Ties go to the cell with A_i present.
    """
    if sign == 0:
        raise ValidationError("mined relationship sign is zero")
    counts = table.cell_counts(i, j)
    cands = [(1, -1), (-1, 1)] if sign > 0 else [(1, 1), (-1, -1)]
    a, b = min(cands, key=lambda c: (counts[c], cands.index(c)))
    mode = FailureMode(i, a, j, b, counts[(a, b)])
    if mode.support == 0:
        raise EmptyMode(f"failure mode ({table.names[i]}={a:+d}, {table.names[j]}={b:+d}) has no training samples",
                        mode=mode)
    return mode


# -- report -------------------------------------------------------------------


@dataclass
class PairDiagnosis:
    pair: tuple[int, int]
    label: str
    mean_cosine: float
    mu_label: float
    sigma_label: float
    kl: float
    classification: Classification
    sample_count: int
    skipped_count: int
    failure_mode: FailureMode | None = None


@dataclass
class DiagnosisReport:
    names: list[str]
    pairs: list[PairDiagnosis]
    attribute_kl: dict[int, float]
    isolated: list[int]
    label_gaussians: dict[str, LabelGaussian]
    gate: float
    config: dict = field(default_factory=dict)
    unmined: list[dict] = field(default_factory=list)
    distributions: dict[tuple[int, int], PairDistribution] = field(default_factory=dict, repr=False)

    @property
    def ranking(self) -> list[int]:
        return sorted(self.attribute_kl, key=lambda a: (-self.attribute_kl[a], a))

    def by_class(self, cls: Classification) -> list[PairDiagnosis]:
        return [p for p in self.pairs if p.classification == cls]

    @property
    def failure_modes(self) -> list[PairDiagnosis]:
        return self.by_class(Classification.FAILURE_MODE)

    @property
    def blind_spots(self) -> list[PairDiagnosis]:
        return self.by_class(Classification.BLIND_SPOT)

    def describe(self, p: PairDiagnosis) -> str:
        a, b = self.names[p.pair[0]], self.names[p.pair[1]]
        text = f"{p.label} relationship between {a} and {b}"
        if p.failure_mode is not None:
            fm = p.failure_mode
            text += f"; failure mode ({self.names[fm.u]}={fm.a:+d}, {self.names[fm.v]}={fm.b:+d})"
        return text

    def _pair_dict(self, p: PairDiagnosis) -> dict:
        fm = None
        if p.failure_mode is not None:
            m = p.failure_mode
            fm = {"u": self.names[m.u], "a": m.a, "v": self.names[m.v], "b": m.b,
                  "support": m.support, "empty": m.empty}
        return {
            "attr_i": self.names[p.pair[0]], "attr_j": self.names[p.pair[1]],
            "i": p.pair[0], "j": p.pair[1], "label": p.label,
            "mean_cosine": p.mean_cosine, "mu_label": p.mu_label, "sigma_label": p.sigma_label,
            "kl": p.kl, "classification": p.classification.value,
            "sample_count": p.sample_count, "skipped_count": p.skipped_count,
            "failure_mode": fm,
        }

    def to_dict(self, timestamp: str | None = None) -> dict:
        return {
            "timestamp": timestamp,
            "kl_units": "nats",
            "config": self.config,
            "attributes": list(self.names),
            "kl_gate": self.gate,
            "label_gaussians": [g.to_dict() for g in self.label_gaussians.values()],
            "pairs": [self._pair_dict(p) for p in self.pairs],
            "attribute_kl": [{"attribute": self.names[a], "index": a, "kl": self.attribute_kl[a]}
                             for a in self.ranking],
            "not_diagnosable": [self.names[a] for a in self.isolated],
            "unmined_pairs": self.unmined,
            "blind_spots": [self._pair_dict(p) for p in self.blind_spots],
            "failure_modes": [self._pair_dict(p) for p in self.failure_modes],
        }

    def to_json(self, timestamp: str | None = None) -> str:
        return json.dumps(self.to_dict(timestamp), indent=2, sort_keys=True) + "\n"

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "kl", "classification", "description"])
        for rank, p in enumerate(self.pairs, 1):
            w.writerow([rank, f"{p.kl:.3f}", p.classification.value, self.describe(p)])
        return buf.getvalue()


def build_report(names: Sequence[str], graph: RelationGraph, table: AnnotationTable,
                 distributions: Mapping[tuple[int, int], PairDistribution],
                 gaussians: Mapping[str, LabelGaussian], pair_kls: Mapping[tuple[int, int], float],
                 gate: float, config: dict | None = None, unmined: list[dict] | None = None,
                 near_zero: float = NEAR_ZERO, far: float = FAR_FROM_LABEL) -> DiagnosisReport:
    """Classify every mined labeled pair and assemble the ranked report."""
    pairs = []
    for e in graph.edges:
        if e.pair not in pair_kls:
            continue
        q = distributions[e.pair]
        g = gaussians[e.label]
        kl = pair_kls[e.pair]
        cls = classify_pair(q.mean_cosine, g.mu, kl, gate, near_zero, far)
        fm = None
        if cls == Classification.FAILURE_MODE:
            try:
                fm = extract_failure_mode(table, e.i, e.j, q.mean_cosine)
            except EmptyMode as exc:
                fm = exc.mode
        pairs.append(PairDiagnosis(e.pair, e.label, q.mean_cosine, g.mu, g.sigma, kl, cls,
                                   q.sample_count, q.skipped_count, fm))
    pairs.sort(key=lambda p: (-p.kl, p.pair))
    attr_kl, isolated = {}, []
    for a in range(len(names)):
        try:
            attr_kl[a] = kl_attribute(pair_kls, graph, a)
        except IsolatedAttribute:
            isolated.append(a)
    return DiagnosisReport(list(names), pairs, attr_kl, isolated, dict(gaussians), gate,
                           dict(config or {}), list(unmined or []), dict(distributions))
