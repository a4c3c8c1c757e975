import json
import math

import numpy as np
import pytest

from repbias.diagnosis import (Classification, FailureMode, build_report, classify_pair, extract_failure_mode,
                               kl_attribute, kl_gate, kl_pair, smoothed_q)
from repbias.errors import BinMismatch, EmptyMode, IsolatedAttribute, NoSamples
from repbias.groundtruth import LabelGaussian, discretize_gaussian, parse_relations
from repbias.relations import AnnotationTable, mine_pair

WL, BS, FM = Classification.WELL_LEARNED, Classification.BLIND_SPOT, Classification.FAILURE_MODE


def brute_kl(p, counts, eps):
    total = sum(counts) + len(counts) * eps
    out = 0.0
    for pb, cb in zip(p, counts):
        if pb > 0:
            out += pb * math.log(pb / ((cb + eps) / total))
    return out


def test_kl_hand_built_4_bins():
    p = [0.1, 0.2, 0.3, 0.4]
    counts = [3, 0, 5, 12]
    assert kl_pair(p, np.array(counts), 0.5) == pytest.approx(brute_kl(p, counts, 0.5), abs=1e-12)


def test_kl_identity_when_p_equals_smoothed_q():
    counts = np.array([4, 0, 9, 1, 6])
    p = smoothed_q(counts, 0.5)
    assert kl_pair(p, counts, 0.5) == 0.0


def test_kl_grows_as_smoothing_shrinks():
    p = np.array([0.0, 0.0, 1.0, 0.0])
    counts = np.array([10, 10, 0, 10])
    vals = [kl_pair(p, counts, e) for e in (1.0, 0.5, 0.1, 0.01)]
    assert all(math.isfinite(v) for v in vals)
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert kl_pair(p, counts, 0.0) == math.inf


def test_kl_count_scaling_with_scaled_smoothing(rng):
    p = rng.dirichlet(np.ones(8))
    counts = rng.integers(0, 20, size=8)
    assert kl_pair(p, counts * 7, 3.5) == pytest.approx(kl_pair(p, counts, 0.5), abs=1e-12)


def test_kl_errors():
    with pytest.raises(BinMismatch):
        kl_pair([0.5, 0.5], np.array([1, 2, 3]))
    with pytest.raises(NoSamples):
        kl_pair([0.5, 0.5], np.array([0, 0]))


def test_kl_attribute_averages():
    g = parse_relations("a,b,x\na,c,x\na,d,y\nb,c,x", list("abcde"))
    kls = {(0, 1): 0.2, (0, 2): 0.4, (0, 3): 0.6, (1, 2): 0.8}
    assert kl_attribute(kls, g, 0) == pytest.approx(0.4)
    assert kl_attribute(kls, g, 3) == 0.6
    assert kl_attribute({p: 0.0 for p in kls}, g, 0) == 0.0
    with pytest.raises(IsolatedAttribute):
        kl_attribute(kls, g, 4)


def test_kl_gate_percentile():
    assert kl_gate([0.0, 1.0, 2.0, 3.0, 4.0]) == 3.0
    assert kl_gate([2.5]) == 2.5


def test_classify_examples():
    assert classify_pair(0.05, 0.5, 1.0, 0.5) == BS
    assert classify_pair(0.6, 0.0, 1.0, 0.5) == FM
    assert classify_pair(0.5, 0.55, 1.0, 0.5) == WL
    assert classify_pair(0.6, 0.0, 0.1, 0.5) == WL


def test_failure_mode_examples():
    def table(cells):
        rows = [list(c) for c, n in cells.items() for _ in range(n)]
        return AnnotationTable([str(k) for k in range(len(rows))], ["i", "j"], rows)

    fm = extract_failure_mode(table({(1, -1): 30, (-1, 1): 300, (1, 1): 5}), 0, 1, 0.4)
    assert (fm.a, fm.b, fm.support) == (1, -1, 30)
    fm = extract_failure_mode(table({(1, 1): 10, (-1, -1): 500, (1, -1): 3}), 0, 1, -0.4)
    assert (fm.a, fm.b) == (1, 1)
    fm = extract_failure_mode(table({(1, -1): 7, (-1, 1): 7}), 0, 1, 0.3)
    assert (fm.a, fm.b) == (1, -1)
    fm = extract_failure_mode(table({(1, 1): 7, (-1, -1): 7}), 0, 1, -0.3)
    assert (fm.a, fm.b) == (1, 1)
    with pytest.raises(EmptyMode) as info:
        extract_failure_mode(table({(1, 1): 4, (-1, 1): 2}), 0, 1, 0.9)
    assert info.value.mode == FailureMode(0, 1, 1, -1, 0)


def _report_fixture(rng):
    names = ["a", "b", "c"]
    graph = parse_relations("a,b,not_related\na,c,not_related\nb,c,not_related", names)
    values = np.where(rng.random((60, 3)) > 0.5, 1, -1)
    table = AnnotationTable([f"s{k}" for k in range(60)], names, values)
    v = rng.normal(size=(3, 60, 8))
    v[1] = v[0] + 0.1 * v[1]  # (a, b) strongly positive
    dists = {e.pair: mine_pair(v[e.i], v[e.j], None, 16, e.pair) for e in graph.edges}
    gauss = {"not_related": LabelGaussian("not_related", 0.0, 0.1, 3)}
    kls = {p: kl_pair(discretize_gaussian(gauss["not_related"], 16), d) for p, d in dists.items()}
    return names, graph, table, dists, gauss, kls


def test_build_report(rng):
    names, graph, table, dists, gauss, kls = _report_fixture(rng)
    report = build_report(names, graph, table, dists, gauss, kls, kl_gate(list(kls.values())), {"x": 1})
    assert [p.pair for p in report.pairs][0] == (0, 1)
    assert report.pairs[0].classification == FM
    assert report.pairs[0].failure_mode is not None
    for p in report.pairs:
        assert (p.failure_mode is not None) == (p.classification == FM)
        assert p.kl >= 0
    assert report.attribute_kl[0] == pytest.approx((kls[(0, 1)] + kls[(0, 2)]) / 2)
    doc = json.loads(report.to_json(timestamp="T"))
    assert doc["timestamp"] == "T" and doc["kl_units"] == "nats" and doc["config"] == {"x": 1}
    assert report.summary_csv().splitlines()[0] == "rank,kl,classification,description"


def test_report_order_independent(rng):
    names, graph, table, dists, gauss, kls = _report_fixture(rng)
    gate = kl_gate(list(kls.values()))
    a = build_report(names, graph, table, dists, gauss, kls, gate)
    rev = dict(reversed(list(kls.items())))
    b = build_report(names, graph, table, dict(reversed(list(dists.items()))), gauss, rev, gate)
    assert a.ranking == b.ranking
    assert a.to_json("t") == b.to_json("t")


def test_report_records_empty_mode():
    names = ["a", "b"]
    graph = parse_relations("a,b,not_related", names)
    table = AnnotationTable(list("wxyz"), names, [[1, 1], [1, 1], [-1, -1], [-1, 1]])
    v = np.ones((4, 3))
    dists = {(0, 1): mine_pair(v, v, [0, 1, 3], 8, (0, 1))}
    gauss = {"not_related": LabelGaussian("not_related", 0.0, 0.05, 1)}
    report = build_report(names, graph, table, dists, gauss, {(0, 1): 2.0}, 1.0)
    fm = report.pairs[0].failure_mode
    assert report.pairs[0].classification == FM
    assert fm.empty and (fm.a, fm.b) == (1, -1)
