"""Synthetic attribute images, bias injection and the two bias experiments.

Each attribute is rendered as a striped patch in its own rectangle, so two
attributes with disjoint rectangles are unrelated by construction. Removing
samples whose annotations disagree manufactures co-occurrence bias.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .diagnosis import FailureMode, kl_pair
from .errors import EmptyStratum, RegionOverflow, ValidationError
from .groundtruth import Edge, RelationGraph, discretize_gaussian, fit_gaussian
from .micronet import LossSpec, MicroNet, TrainConfig, default_config, predict_sign, train
from .pipeline import DiagnosisConfig, attribute_representations, diagnose, mine_relations
from .relations import AnnotationTable
from .seeding import subseed, substream

NOT_RELATED = "not_related"


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic dataset description.

    ``regions`` holds one ``(top, left, height, width)`` rectangle per
    attribute. ``joint`` gives the probability of each of the ``2**n``
    annotation cells, where bit k of the cell index set means attribute k is
    present; ``None`` means independent attributes with probability 0.5 each.
    """

    image_size: int = 16
    regions: tuple[tuple[int, int, int, int], ...] = ((2, 1, 12, 6), (2, 9, 12, 6))
    intensities: tuple[float, ...] = (1.0, 1.0)
    joint: tuple[float, ...] | None = None
    noise: float = 0.3
    samples: int = 400
    seed: int = 0

    @property
    def attribute_count(self) -> int:
        return len(self.regions)

    @property
    def names(self) -> list[str]:
        return [f"attr_{k + 1}" for k in range(self.attribute_count)]

    def joint_probs(self) -> np.ndarray:
        n = self.attribute_count
        if self.joint is None:
            return np.full(2 ** n, 1.0 / 2 ** n)
        p = np.asarray(self.joint, dtype=np.float64)
        if p.shape != (2 ** n,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError(f"joint must be {2 ** n} non-negative probabilities summing to 1")
        return p

    def validate(self) -> None:
        if len(self.intensities) != self.attribute_count:
            raise ValidationError("one intensity per attribute required")
        if self.samples <= 0 or self.noise < 0 or self.image_size <= 0:
            raise ValidationError("samples and image size must be positive, noise non-negative")
        for k, (top, left, h, w) in enumerate(self.regions):
            if top < 0 or left < 0 or h <= 0 or w <= 0 or top + h > self.image_size or left + w > self.image_size:
                raise RegionOverflow(f"region {k} {(top, left, h, w)} leaves the {self.image_size}px image")
        self.joint_probs()

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "regions": [list(r) for r in self.regions],
                "intensities": list(self.intensities), "joint": None if self.joint is None else list(self.joint),
                "noise": self.noise, "samples": self.samples, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(int(d["image_size"]), tuple(tuple(r) for r in d["regions"]), tuple(d["intensities"]),
                   None if d.get("joint") is None else tuple(d["joint"]), float(d["noise"]),
                   int(d["samples"]), int(d["seed"]))


def two_attribute_spec(**kw) -> SynthSpec:
    # 800 samples: at 400 the seed spread of balanced-run KL swamps the bias signal
    kw.setdefault("samples", 800)
    return SynthSpec(**kw)


def four_attribute_spec(**kw) -> SynthSpec:
    kw.setdefault("regions", ((1, 1, 6, 6), (1, 9, 6, 6), (9, 1, 6, 6), (9, 9, 6, 6)))
    kw.setdefault("intensities", (1.0,) * 4)
    kw.setdefault("samples", 600)
    return SynthSpec(**kw)


def pattern(k: int, h: int, w: int) -> np.ndarray:
    """Stripes in {0.5, 1}: vertical for even attributes, horizontal for odd."""
    rows, cols = np.mgrid[0:h, 0:w]
    stripes = (cols if k % 2 == 0 else rows) % 2
    return 0.5 + 0.5 * stripes


def render(spec: SynthSpec, present: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """Images (samples, 1, H, W) for a (samples, n) presence matrix."""
    present = np.asarray(present, dtype=bool)
    s = spec.image_size
    out = np.zeros((present.shape[0], 1, s, s))
    for k, (top, left, h, w) in enumerate(spec.regions):
        patch = spec.intensities[k] * pattern(k, h, w)
        out[present[:, k], 0, top:top + h, left:left + w] += patch
    if noise is not None:
        out += noise
    return out


def synth_dataset(spec: SynthSpec) -> tuple[np.ndarray, AnnotationTable]:
    spec.validate()
    rng = substream(spec.seed, "synth")
    n = spec.attribute_count
    cells = rng.choice(2 ** n, size=spec.samples, p=spec.joint_probs())
    present = ((cells[:, None] >> np.arange(n)) & 1).astype(bool)
    noise = spec.noise * rng.standard_normal((spec.samples, 1, spec.image_size, spec.image_size))
    images = render(spec, present, noise)
    values = np.where(present, 1, -1)
    ids = [f"s{k:05d}" for k in range(spec.samples)]
    return images, AnnotationTable(ids, spec.names, values)


def disjoint_relations(spec: SynthSpec) -> RelationGraph:
    """Every pair of attributes with non-overlapping regions is labeled not related."""
    edges = []
    for i, j in combinations(range(spec.attribute_count), 2):
        ti, li, hi, wi = spec.regions[i]
        tj, lj, hj, wj = spec.regions[j]
        overlap = ti < tj + hj and tj < ti + hi and li < lj + wj and lj < li + wi
        if not overlap:
            edges.append(Edge(i, j, NOT_RELATED))
    return RelationGraph(spec.names, edges)


# -- bias injection -----------------------------------------------------------


@dataclass(frozen=True)
class BiasSpec:
    pair: tuple[int, int]
    tau: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError("tau must lie in [0, 1]")
        if self.pair[0] == self.pair[1]:
            raise ValidationError("bias pair needs two distinct attributes")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def bias_removals(table: AnnotationTable, spec: BiasSpec) -> np.ndarray:
    """Rows removed by :func:`inject_bias`.

    The opposite-annotation rows are shuffled once per seed and the first
    ``round(tau * N_opp)`` are dropped, so a larger tau removes a superset.
    """
    i, j = spec.pair
    opposite = np.flatnonzero(table.values[:, i] * table.values[:, j] < 0)
    order = substream(spec.seed, "bias").permutation(opposite)
    return np.sort(order[:round_half_up(spec.tau * opposite.size)])


def inject_bias(table: AnnotationTable, images, spec: BiasSpec):
    drop = bias_removals(table, spec)
    keep = np.setdiff1d(np.arange(len(table)), drop)
    return np.asarray(images)[keep], table.subset(keep)


# -- entropy baseline and accuracy decrease -------------------------------------

CELL_ORDER = ((1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(frozen=True)
class RankedMode:
    pair: tuple[int, int]
    mode: FailureMode
    score: float


def entropy_baseline(table: AnnotationTable, pairs, top_n: int | None = None) -> list[RankedMode]:
    """Rarest annotation cell per pair, ranked by joint-annotation entropy.

    Entropy is taken over the three cells other than (-1, -1); ties in the
    rarest cell go to the first in (+1,+1), (+1,-1), (-1,+1), (-1,-1) order.
    """
    out = []
    for i, j in pairs:
        counts = table.cell_counts(i, j)
        a, b = min(CELL_ORDER, key=lambda c: (counts[c], CELL_ORDER.index(c)))
        kept = np.array([counts[c] for c in CELL_ORDER[:3]], dtype=np.float64)
        total = kept.sum()
        ent = 0.0
        if total > 0:
            p = kept[kept > 0] / total
            ent = float(-np.sum(p * np.log(p)))
        out.append(RankedMode((i, j), FailureMode(i, a, j, b, counts[(a, b)]), ent))
    order = sorted(range(len(out)), key=lambda k: (-out[k].score, k))
    ranked = [out[k] for k in order]
    return ranked if top_n is None else ranked[:top_n]


@dataclass(frozen=True)
class FailureModeEval:
    mode: FailureMode
    acc_ordinary: float
    acc_mode: float

    @property
    def decrease(self) -> float:
        return self.acc_ordinary - self.acc_mode


def _accuracy(pred, truth, rows, name, table):
    if rows.size == 0:
        raise EmptyStratum(f"no test sample in stratum {name}")
    return float(np.mean(pred[rows] == truth[rows]))


def accuracy_decrease(net: MicroNet, images, table: AnnotationTable, mode: FailureMode,
                      predictions: np.ndarray | None = None) -> FailureModeEval:
    """Average accuracy on ordinary images minus that on the failure-mode cell."""
    u, a, v, b = mode.u, mode.a, mode.v, mode.b
    if predictions is None:
        predictions = np.stack([predict_sign(net, images, k) for k in (u, v)], axis=1)
        pu, pv = predictions[:, 0], predictions[:, 1]
    else:
        pu, pv = predictions[:, u], predictions[:, v]
    yu, yv = table.values[:, u], table.values[:, v]
    nu_, nv_ = table.names[u], table.names[v]
    in_u = np.flatnonzero(yu == a)
    in_v = np.flatnonzero(yv == b)
    both = np.flatnonzero((yu == a) & (yv == b))
    ordinary = (_accuracy(pu, yu, in_u, f"{nu_}={a:+d}", table) + _accuracy(pv, yv, in_v, f"{nv_}={b:+d}", table)) / 2
    cell = f"{nu_}={a:+d},{nv_}={b:+d}"
    in_mode = (_accuracy(pu, yu, both, cell, table) + _accuracy(pv, yv, both, cell, table)) / 2
    return FailureModeEval(mode, ordinary, in_mode)


def all_predictions(net: MicroNet, images) -> np.ndarray:
    from .micronet import forward

    scores = forward(net, images).outputs[-1]
    return np.where(scores >= 0.0, 1, -1)


# -- experiments --------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    diagnosis: DiagnosisConfig = field(default_factory=DiagnosisConfig)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {"synth": self.synth.to_dict(), "train": asdict(self.train), "diagnosis": self.diagnosis.to_dict()}


def train_on(images, table: AnnotationTable, cfg: ExperimentConfig, seed: int) -> MicroNet:
    net_cfg = default_config(len(table.names), cfg.synth.image_size)
    net = MicroNet.initialize(net_cfg, substream(seed, "init"), cfg.train.init_scale)
    tcfg = replace(cfg.train, seed=subseed(seed, "train"))
    return train(net, images, table.values, LossSpec.logistic(len(table.names)), tcfg)


@dataclass
class Experiment2Cell:
    pair: tuple[int, int]
    tau: float
    seed: int
    mean_cosine: float
    sample_count: int
    kl: float = math.nan
    distribution: object = None


@dataclass
class Experiment2Result:
    cells: list[Experiment2Cell]
    reference: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pair", "tau", "seed", "kl", "mean_cosine", "sample_count"])
        for c in sorted(self.cells, key=lambda c: (c.pair, c.tau, c.seed)):
            w.writerow([f"{c.pair[0]}-{c.pair[1]}", c.tau, c.seed, repr(float(c.kl)), repr(float(c.mean_cosine)), c.sample_count])
        return buf.getvalue()

    def mean_kl(self, pair, tau) -> float:
        vals = [c.kl for c in self.cells if c.pair == tuple(pair) and c.tau == tau]
        return math.fsum(vals) / len(vals)

    def kls(self, pair, tau) -> list[float]:
        return [c.kl for c in sorted(self.cells, key=lambda c: c.seed) if c.pair == tuple(pair) and c.tau == tau]

    def spearman(self, pair) -> float:
        rows = [(c.tau, c.kl) for c in self.cells if c.pair == tuple(pair)]
        taus = sorted({t for t, _ in rows})
        means = [self.mean_kl(pair, t) for t in taus]
        return float(spearmanr(taus, means).correlation)


def _mine_cell(images, table, graph, cfg: ExperimentConfig, seed: int):
    net = train_on(images, table, cfg, seed)
    reps = attribute_representations(net, images, cfg.diagnosis)
    dists, _ = mine_relations(reps, table, [e.pair for e in graph.edges], cfg.diagnosis.bins)
    return dists


def run_experiment2(pairs: Sequence[tuple[int, int]], taus: Sequence[float], seeds: Sequence[int],
                    cfg: ExperimentConfig = ExperimentConfig()) -> Experiment2Result:
    """KL of each biased pair as a function of the bias level tau.

    The ground-truth prior of each label is fitted on balanced (tau = 0)
    control networks, one per seed, whose labeled pairs play the role of the
    well-learned majority. Each grid cell then trains a fresh network on the
    biased set and measures KL of the biased pair against that prior.
    """
    graph = disjoint_relations(cfg.synth)
    labels = {e.pair: e.label for e in graph.edges}
    for p in pairs:
        if tuple(p) not in labels:
            raise ValidationError(f"pair {p} is not a labeled relationship of the synthetic task")
    cells: list[Experiment2Cell] = []
    control_means: dict[str, list[float]] = {}
    for seed in seeds:
        images, table = synth_dataset(replace(cfg.synth, seed=seed))
        control = _mine_cell(images, table, graph, cfg, seed)
        for pair, d in control.items():
            control_means.setdefault(labels[pair], []).append(d.mean_cosine)
        for pair in pairs:
            pair = tuple(pair)
            for tau in taus:
                if tau == 0:
                    d = control[pair]
                else:
                    bimg, btab = inject_bias(table, images, BiasSpec(pair, tau, seed))
                    d = _mine_cell(bimg, btab, graph, cfg, seed)[pair]
                cells.append(Experiment2Cell(pair, float(tau), seed, d.mean_cosine, d.sample_count, distribution=d))
    priors = {lab: fit_gaussian(lab, vals, cfg.diagnosis.sigma_min) for lab, vals in control_means.items()}
    for c in cells:
        p = discretize_gaussian(priors[labels[c.pair]], cfg.diagnosis.bins)
        c.kl = kl_pair(p, c.distribution, cfg.diagnosis.smoothing)
    return Experiment2Result(cells, {lab: g.to_dict() for lab, g in priors.items()})


@dataclass
class Experiment3Row:
    seed: int
    method: str
    rank: int
    evaluation: FailureModeEval
    names: list[str]

    def mode_text(self) -> str:
        m = self.evaluation.mode
        return f"({self.names[m.u]}={m.a:+d};{self.names[m.v]}={m.b:+d})"


@dataclass
class Experiment3Result:
    rows: list[Experiment3Row]
    seeds: list[int]
    top_n: int

    def mean_decrease(self, method: str) -> float:
        """Average over seeds of the mean decrease of that seed's modes (0 when none)."""
        per_seed = []
        for s in self.seeds:
            vals = [r.evaluation.decrease for r in self.rows if r.seed == s and r.method == method]
            per_seed.append(math.fsum(vals) / len(vals) if vals else 0.0)
        return math.fsum(per_seed) / len(per_seed)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "method", "rank", "mode", "acc_ordinary", "acc_mode", "decrease"])
        for r in self.rows:
            e = r.evaluation
            w.writerow([r.seed, r.method, r.rank, r.mode_text(), repr(float(e.acc_ordinary)), repr(float(e.acc_mode)),
                        repr(float(e.decrease))])
        return buf.getvalue()


def run_experiment3(bias_pair: tuple[int, int], seeds: Sequence[int], top_n: int = 3,
                    cfg: ExperimentConfig | None = None, tau: float = 1.0,
                    test_samples: int | None = None) -> Experiment3Result:
    """Compare failure modes from diagnosis with the entropy baseline.

    Per seed: bias one pair of a balanced synthetic set, train, diagnose on the
    training set, and measure each method's top-N modes on an unbiased test set.
    """
    cfg = cfg or ExperimentConfig(synth=four_attribute_spec())
    graph = disjoint_relations(cfg.synth)
    rows: list[Experiment3Row] = []
    for seed in seeds:
        images, table = synth_dataset(replace(cfg.synth, seed=seed))
        bimg, btab = inject_bias(table, images, BiasSpec(tuple(bias_pair), tau, seed))
        net = train_on(bimg, btab, cfg, seed)
        test_spec = replace(cfg.synth, seed=subseed(seed, "test"), samples=test_samples or cfg.synth.samples)
        timg, ttab = synth_dataset(test_spec)
        preds = all_predictions(net, timg)

        report = diagnose(net, bimg, btab, graph, cfg.diagnosis)
        ours = [p.failure_mode for p in report.failure_modes][:top_n]
        theirs = [m.mode for m in entropy_baseline(btab, [e.pair for e in graph.edges], top_n)]
        for method, modes in (("ours", ours), ("entropy", theirs)):
            for rank, mode in enumerate(modes, 1):
                ev = accuracy_decrease(net, timg, ttab, mode, predictions=preds)
                rows.append(Experiment3Row(seed, method, rank, ev, list(table.names)))
    return Experiment3Result(rows, list(seeds), top_n)
