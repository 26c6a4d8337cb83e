import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_matching
from seqdet3d.evaluation import MatchConfig, evaluate, match, precision_recall_f1, tp_errors
from seqdet3d.geometry import Box3D, center_distance_bev


def box(x, y, cat=0, **kw):
    return Box3D(x, y, 0.0, kw.pop("l", 4.0), kw.pop("w", 2.0), kw.pop("h", 1.5), kw.pop("yaw", 0.0), category=cat, **kw)


def random_instance(rng, max_boxes=5, categories=3):
    """Scene-scale instance: predictions are noisy copies of ground truth plus false positives."""
    gts = [box(rng.uniform(-50, 50), rng.uniform(-50, 50), int(rng.integers(categories)))
           for _ in range(rng.integers(0, max_boxes + 1))]
    preds = []
    for _ in range(rng.integers(0, max_boxes + 1)):
        if gts and rng.random() < 0.7:
            g = gts[rng.integers(len(gts))]
            preds.append(box(g.x + rng.normal(0, 1), g.y + rng.normal(0, 1), g.category))
        else:
            preds.append(box(rng.uniform(-50, 50), rng.uniform(-50, 50), int(rng.integers(categories))))
    return preds, gts


def distance_matrix(preds, gts):
    d = np.full((len(preds), len(gts)), np.inf)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.category == g.category:
                d[i, j] = center_distance_bev(p, g)
    return d


def test_match_config_validation():
    assert MatchConfig((1, 2)).thresholds == (1.0, 2.0)
    for bad in ((), (0.0, 1.0), (2.0, 1.0), (1.0, 1.0)):
        with pytest.raises(ValueError):
            MatchConfig(bad)


def test_perfect_and_empty():
    gts = [box(0, 0), box(10, 0, 1)]
    r = precision_recall_f1(gts, gts)
    assert r.precision == r.recall == r.f1 == 1.0
    assert r.tp.ate == 0.0 and r.tp.count == 2
    r = precision_recall_f1([], gts)
    assert r.precision == r.recall == r.f1 == 0.0 and r.tp is None
    assert evaluate([[]], [[]]).f1 == 0.0


def test_threshold_is_strict_and_category_aware():
    gts = [box(0, 0)]
    assert match([box(2.0, 0)], gts, None, 2.0) == []
    assert match([box(1.999, 0)], gts, None, 2.0) == [(0, 0)]
    assert match([box(0.1, 0, cat=1)], gts, None, 4.0) == []


def test_greedy_prefers_closest_pair():
    gts = [box(0, 0), box(3, 0)]
    preds = [box(1.4, 0), box(0.2, 0)]
    assert sorted(match(preds, gts, 0, 2.0)) == [(0, 1), (1, 0)]


def test_greedy_is_not_always_maximal():
    # p0 sits between g0 and g1 and grabs g0 first, starving p1
    gts = [box(0, 0), box(1.3, 0)]
    preds = [box(0.6, 0), box(-0.7, 0)]
    assert len(match(preds, gts, None, 1.0)) == 1
    assert max_matching(distance_matrix(preds, gts), 1.0) == 2


def test_counts_precision_recall():
    gts = [box(0, 0), box(10, 0), box(20, 0, 1)]
    preds = [box(0.3, 0), box(30, 0), box(20.2, 0, 1), box(40, 0, 1)]
    r = evaluate([preds], [gts], MatchConfig((1.0,)))
    cells = {c.category: c for c in r.cells}
    assert (cells[0].precision, cells[0].recall) == (0.5, 0.5)
    assert (cells[1].precision, cells[1].recall) == (0.5, 1.0)
    assert r.precision == pytest.approx(0.5)
    assert r.recall == pytest.approx(0.75)
    assert r.f1 == pytest.approx((0.5 + 2 / 3) / 2)


def test_tp_errors():
    g = box(0, 0, l=4, w=2, h=1, yaw=3.0, vx=1.0)
    p = box(3, 4, l=2, w=2, h=1, yaw=-3.0, vx=1.0, vy=2.0)
    e = tp_errors([(p, g)])
    assert e.ate == pytest.approx(5.0)
    assert e.ase == pytest.approx(0.5)
    assert e.aoe == pytest.approx(2 * math.pi - 6.0)
    assert e.ave == pytest.approx(2.0)
    assert tp_errors([]) is None


def test_report_lines_and_text():
    gts = [box(0, 0), box(10, 0, 9)]
    r = evaluate([[box(0.5, 0)]], [gts])
    lines = r.to_lines()
    assert "metric car 2 recall 1.000000" in lines
    assert "metric traffic_cone 0.5 matches 0" in lines
    assert "metric mean all f1 0.375000" in lines  # car 0/1/1/1 over thresholds, cone 0
    assert all(len(l.split()) == 5 for l in lines)
    text = r.to_text()
    assert text.startswith("scenes: 1\n") and "ATE 0.5000" in text


def test_dataset_counts_are_pooled():
    gts = [[box(0, 0)], [box(0, 0), box(5, 0)]]
    preds = [[box(0, 0)], []]
    r = evaluate(preds, gts, MatchConfig((1.0,)))
    assert r.cells[0].recall == pytest.approx(1 / 3) and r.cells[0].precision == 1.0
    with pytest.raises(ValueError):
        evaluate(preds, gts[:1])


@given(st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_matching_is_one_to_one_and_bounded(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_instance(rng)
    t = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
    pairs = match(preds, gts, None, t)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
    for i, j in pairs:
        assert preds[i].category == gts[j].category
        assert center_distance_bev(preds[i], gts[j]) < t
    assert len(pairs) <= max_matching(distance_matrix(preds, gts), t)
    # greedy is maximal: no unmatched pair is left within threshold
    used_p, used_g = {i for i, _ in pairs}, {j for _, j in pairs}
    d = distance_matrix(preds, gts)
    free = [(i, j) for i in range(len(preds)) for j in range(len(gts)) if i not in used_p and j not in used_g]
    assert all(d[i, j] >= t for i, j in free)


@given(st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_metrics_invariant_to_prediction_order(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_instance(rng)
    a = precision_recall_f1(preds, gts)
    b = precision_recall_f1(list(reversed(preds)), gts)
    assert [c.matches for c in a.cells] == [c.matches for c in b.cells]
