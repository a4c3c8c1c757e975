"""Annotated attribute-relationship graph and the per-label Gaussian priors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DuplicateEdge, EmptyLabel, SelfEdge, UnknownAttribute, ValidationError
from .relations import bin_edges

DEFAULT_SIGMA_MIN = 0.05


@dataclass(frozen=True)
class Edge:
    i: int
    j: int
    label: str

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass
class RelationGraph:
    """Edges are stored with ``i < j``. The graph need not be complete."""

    names: list[str]
    edges: list[Edge] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.edges:
            if e.i == e.j:
                raise SelfEdge(f"self edge on {self.names[e.i]!r}")
            if not (0 <= e.i < e.j < len(self.names)):
                raise ValidationError(f"edge {e} must satisfy 0 <= i < j < {len(self.names)}")
            if e.pair in seen:
                raise DuplicateEdge(f"duplicate edge {self.names[e.i]!r}-{self.names[e.j]!r}")
            seen.add(e.pair)

    @property
    def labels(self) -> list[str]:
        """Label vocabulary in first-appearance order."""
        return list(dict.fromkeys(e.label for e in self.edges))

    def degree(self, a: int) -> int:
        return sum(1 for e in self.edges if a in e.pair)

    def incident(self, a: int) -> list[Edge]:
        return [e for e in self.edges if a in e.pair]

    def label_of(self, i: int, j: int) -> str | None:
        key = (min(i, j), max(i, j))
        for e in self.edges:
            if e.pair == key:
                return e.label
        return None

    def to_csv(self) -> str:
        lines = ["# attr_i,attr_j,label"]
        lines += [f"{self.names[e.i]},{self.names[e.j]},{e.label}" for e in self.edges]
        return "\n".join(lines) + "\n"


def parse_relations(text: str | Iterable[str], names: Sequence[str]) -> RelationGraph:
    """Parse ``attr_i,attr_j,label`` lines; ``#`` starts a comment."""
    lines = text.splitlines() if isinstance(text, str) else list(text)
    index = {n: k for k, n in enumerate(names)}
    edges: list[Edge] = []
    seen: set[tuple[int, int]] = set()
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or not all(parts):
            raise ValidationError(f"line {lineno}: expected 'attr_i,attr_j,label', got {line!r}")
        a, b, label = parts
        for name in (a, b):
            if name not in index:
                raise UnknownAttribute(f"line {lineno}: unknown attribute {name!r}")
        if a == b:
            raise SelfEdge(f"line {lineno}: self edge on {a!r}")
        i, j = sorted((index[a], index[b]))
        if (i, j) in seen:
            raise DuplicateEdge(f"line {lineno}: duplicate edge {a!r}-{b!r}")
        seen.add((i, j))
        edges.append(Edge(i, j, label))
    return RelationGraph(list(names), edges)


def read_relations(path, names: Sequence[str]) -> RelationGraph:
    with open(path) as fh:
        return parse_relations(fh.read(), names)


# -- label Gaussians ----------------------------------------------------------


@dataclass(frozen=True)
class LabelGaussian:
    label: str
    mu: float
    sigma: float
    member_pair_count: int

    def to_dict(self) -> dict:
        return {"label": self.label, "mu": self.mu, "sigma": self.sigma, "member_pair_count": self.member_pair_count}


def fit_gaussian(label: str, values: Sequence[float], sigma_min: float = DEFAULT_SIGMA_MIN,
                 members: int | None = None) -> LabelGaussian:
    """Mean and population deviation of ``values``, deviation floored at ``sigma_min``.

    Sums are exact (fsum), so the result does not depend on value order.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise EmptyLabel(f"label {label!r} has no member pairs")
    mu = math.fsum(vals) / len(vals)
    var = math.fsum((v - mu) ** 2 for v in vals) / len(vals)
    sigma = math.sqrt(var)
    if len(vals) == 1 or sigma < sigma_min:
        sigma = sigma_min
    return LabelGaussian(label, mu, sigma, len(vals) if members is None else members)


def fit_label_gaussians(graph: RelationGraph, pair_means: Mapping[tuple[int, int], float],
                        sigma_min: float = DEFAULT_SIGMA_MIN) -> dict[str, LabelGaussian]:
    """One Gaussian per label over the mean cosines of that label's pairs.

    Pairs missing from ``pair_means`` (e.g. not minable) are left out.
    """
    out = {}
    for label in graph.labels:
        vals = [pair_means[e.pair] for e in graph.edges if e.label == label and e.pair in pair_means]
        out[label] = fit_gaussian(label, vals, sigma_min)
    return out


def fit_label_gaussians_pooled(graph: RelationGraph, pair_values: Mapping[tuple[int, int], Sequence[float]],
                               sigma_min: float = DEFAULT_SIGMA_MIN) -> dict[str, LabelGaussian]:
    """Alternative fit over the pooled per-image cosines of every member pair."""
    out = {}
    for label in graph.labels:
        pairs = [e.pair for e in graph.edges if e.label == label and e.pair in pair_values]
        vals = [float(v) for p in pairs for v in np.asarray(pair_values[p]).ravel()]
        out[label] = fit_gaussian(label, vals, sigma_min, members=len(pairs))
    return out


def _cdf_diff(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # Upper-tail form on the positive side keeps mirrored bins equal to rounding.
    upper = lo >= 0
    return np.where(upper, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def discretize_gaussian(g: LabelGaussian | tuple[float, float], bins: int) -> np.ndarray:
    """Probability of each [-1, 1] histogram bin under N(mu, sigma^2), renormalized."""
    if bins < 2:
        raise ValidationError("need at least 2 bins")
    mu, sigma = (g.mu, g.sigma) if isinstance(g, LabelGaussian) else (float(g[0]), float(g[1]))
    if not sigma > 0:
        raise ValidationError("sigma must be positive")
    z = (bin_edges(bins) - mu) / sigma
    p = _cdf_diff(z[:-1], z[1:])
    total = math.fsum(p.tolist())
    if not total > 0:
        # Mass entirely outside [-1, 1] underflows; put it in the nearest bin.
        p = np.zeros(bins)
        p[0 if mu < 0 else bins - 1] = 1.0
        return p
    return p / total
