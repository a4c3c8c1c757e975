"""End-to-end diagnosis of a trained network on its own training set."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attribution import LocalSurrogate, MaskConfig, PatternMask, default_lambda, greedy_mask, local_surrogate
from .diagnosis import (DEFAULT_KL_PERCENTILE, DEFAULT_SMOOTHING, FAR_FROM_LABEL, NEAR_ZERO, DiagnosisReport,
                        build_report, kl_gate, kl_pair)
from .errors import NoSamples, ValidationError
from .groundtruth import (DEFAULT_SIGMA_MIN, LabelGaussian, RelationGraph, discretize_gaussian,
                          fit_label_gaussians, fit_label_gaussians_pooled)
from .micronet import MicroNet, forward
from .relations import DEFAULT_BINS, AnnotationTable, PairDistribution, filter_pair_samples, mine_pair

PAIR_MEANS = "pair_means"
POOLED = "pooled"


@dataclass(frozen=True)
class DiagnosisConfig:
    """Tunables of one diagnosis run.

    ``lam`` fixes the mask penalty outright; otherwise it is
    ``lam_factor * E_I[(nu . x)^2] / N`` per attribute. ``kl_gate`` fixes the
    "high KL" threshold; otherwise the ``kl_percentile``-th percentile of the
    run's labeled-pair KLs is used.
    """

    lam: float | None = None
    lam_factor: float = 0.01
    max_units: int | None = None
    bins: int = DEFAULT_BINS
    smoothing: float = DEFAULT_SMOOTHING
    sigma_min: float = DEFAULT_SIGMA_MIN
    kl_percentile: float = DEFAULT_KL_PERCENTILE
    kl_gate: float | None = None
    near_zero: float = NEAR_ZERO
    far: float = FAR_FROM_LABEL
    fit: str = PAIR_MEANS

    def __post_init__(self):
        if self.fit not in (PAIR_MEANS, POOLED):
            raise ValidationError(f"fit must be {PAIR_MEANS!r} or {POOLED!r}")
        if self.bins < 2 or self.smoothing < 0 or self.sigma_min <= 0 or self.lam_factor < 0:
            raise ValidationError("invalid diagnosis configuration")
        if not 0 <= self.kl_percentile <= 100:
            raise ValidationError("kl_percentile must lie in [0, 100]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Representations:
    """Per-attribute surrogates, masks and inference vectors over one image set."""

    surrogates: list[LocalSurrogate]
    masks: list[PatternMask]
    vectors: list[np.ndarray] = field(default_factory=list)


def attribute_representations(net: MicroNet, images, cfg: DiagnosisConfig = DiagnosisConfig(),
                              chunk: int = 256) -> Representations:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValidationError("expected a non-empty (samples, C, H, W) image stack")
    n = net.attribute_count
    parts: list[list[LocalSurrogate]] = [[] for _ in range(n)]
    for start in range(0, images.shape[0], chunk):
        trace = forward(net, images[start:start + chunk])
        for a in range(n):
            parts[a].append(local_surrogate(net, trace, a))
    surrogates = [
        LocalSurrogate(np.concatenate([s.nu for s in ps]), np.concatenate([s.beta for s in ps]),
                       np.concatenate([s.score for s in ps]), np.concatenate([s.x for s in ps]))
        for ps in parts
    ]
    masks, vectors = [], []
    for s in surrogates:
        lam = cfg.lam if cfg.lam is not None else default_lambda(s, cfg.lam_factor)
        m = greedy_mask(s, MaskConfig(lam, cfg.max_units))
        masks.append(m)
        vectors.append(m.rho[None] * s.nu)
    return Representations(surrogates, masks, vectors)


def mine_relations(reps: Representations, table: AnnotationTable, pairs, bins: int = DEFAULT_BINS):
    """Mined distributions for each pair; pairs with no usable sample go to ``unmined``."""
    dists: dict[tuple[int, int], PairDistribution] = {}
    unmined = []
    for i, j in pairs:
        try:
            subset = filter_pair_samples(table, i, j)
            dists[(i, j)] = mine_pair(reps.vectors[i], reps.vectors[j], subset, bins, (i, j))
        except NoSamples as exc:
            unmined.append({"i": i, "j": j, "reason": str(exc)})
    return dists, unmined


def fit_gaussians(graph: RelationGraph, dists, cfg: DiagnosisConfig) -> dict[str, LabelGaussian]:
    if cfg.fit == POOLED:
        return fit_label_gaussians_pooled(graph, {p: d.cosines for p, d in dists.items()}, cfg.sigma_min)
    return fit_label_gaussians(graph, {p: d.mean_cosine for p, d in dists.items()}, cfg.sigma_min)


def diagnose(net: MicroNet, images, table: AnnotationTable, graph: RelationGraph,
             cfg: DiagnosisConfig = DiagnosisConfig(), gaussians: dict[str, LabelGaussian] | None = None,
             reps: Representations | None = None, extra_config: dict | None = None) -> DiagnosisReport:
    """Mine every labeled pair, compare with the label priors, classify.

    ``gaussians`` overrides the priors fitted from this network's own pairs,
    e.g. priors calibrated on reference networks.
    """
    if table.names != graph.names:
        raise ValidationError("annotation table and relation graph list different attributes")
    if len(table) != np.asarray(images).shape[0]:
        raise ValidationError("images and annotations have different sample counts")
    if reps is None:
        reps = attribute_representations(net, images, cfg)
    dists, unmined = mine_relations(reps, table, [e.pair for e in graph.edges], cfg.bins)
    if gaussians is None:
        gaussians = fit_gaussians(graph, dists, cfg)
    kls = {}
    for e in graph.edges:
        if e.pair in dists:
            kls[e.pair] = kl_pair(discretize_gaussian(gaussians[e.label], cfg.bins), dists[e.pair], cfg.smoothing)
    gate = cfg.kl_gate if cfg.kl_gate is not None else kl_gate(list(kls.values()), cfg.kl_percentile)
    config = dict(cfg.to_dict(), **(extra_config or {}))
    config["mask_lambdas"] = [m.lam for m in reps.masks]
    config["mask_sizes"] = [m.selected_count for m in reps.masks]
    return build_report(table.names, graph, table, dists, gaussians, kls, gate, config, unmined,
                        near_zero=cfg.near_zero, far=cfg.far)
