import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdet3d.decoding import DecodeConfig, detect_many
from seqdet3d.geometry import Box3D, iou_bev
from seqdet3d.model import DecoderConfig, EncoderConfig, ModelConfig, init_params
from seqdet3d.refine import cascade, cascade_many, cluster_boxes, complete, components, merge_group
from seqdet3d.scenegen import GenConfig, generate_dataset
from seqdet3d.tokenizer import END, VocabLayout

LAYOUT = VocabLayout()
CFG = ModelConfig(
    EncoderConfig(extent=48.0, cell=3.0, pillar_dim=8, out_dim=16),
    DecoderConfig(layers=1, heads=2, dim=16, ff_dim=32, dropout=0.0, t_max=42),
)


def box(x, y, cat=0, yaw=0.0, l=4.0, w=2.0):
    return Box3D(x, y, 0.5, l, w, 1.5, yaw, 1.0, -2.0, category=cat)


def test_identical_pair_merges_exactly():
    b = box(3.3, -7.1, yaw=0.7)
    assert cluster_boxes([b, b]) == [b]


def test_below_threshold_pair_is_untouched():
    a, b = box(0, 0), box(3.7, 0)
    assert 0 < iou_bev(a, b) < 0.1
    assert cluster_boxes([a, b]) == [a, b]
    assert cluster_boxes([a, b], iou_threshold=0.03) != [a, b]


def test_chains_merge_transitively():
    boxes = [box(0, 0), box(2, 0), box(4, 0), box(30, 0)]
    assert components(boxes, 0.3) == [[0, 1, 2], [3]]
    merged = cluster_boxes(boxes, 0.3)
    assert len(merged) == 2 and merged[0].x == pytest.approx(2.0) and merged[1] == boxes[3]


def test_merge_averages_across_the_yaw_seam():
    m = merge_group([box(0, 0, yaw=math.pi - 0.1), box(0, 0, yaw=-math.pi + 0.1)])
    assert abs(abs(m.yaw) - math.pi) < 1e-9 or m.yaw == pytest.approx(-math.pi)


def test_merge_category_vote():
    assert merge_group([box(0, 0, 1), box(0, 0, 2), box(0, 0, 2)]).category == 2
    assert merge_group([box(0, 0, 3), box(0, 0, 1)]).category == 3


@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(-3.1, 3.1)), max_size=8))
@settings(max_examples=100, deadline=None)
def test_clusters_are_separated(specs):
    boxes = [box(x, y, yaw=t) for x, y, t in specs]
    groups = components(boxes)
    assert sorted(i for g in groups for i in g) == list(range(len(boxes)))
    for a in range(len(groups)):
        for b in range(a + 1, len(groups)):
            assert all(iou_bev(boxes[i], boxes[j]) < 0.1 for i in groups[a] for j in groups[b])
    assert len(cluster_boxes(boxes)) == len(groups)


@pytest.fixture(scope="module")
def models():
    prior = init_params(CFG, 1)
    prior["dec.out.b"].value[END] = -1.0
    completion = init_params(CFG, 2)
    completion["dec.out.b"].value[END] = -1.0
    return prior, completion


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(GenConfig(k_min=1, k_max=4), 3, seed=12)


def test_completion_keeps_prior_and_adds_the_rest(models, scenes):
    prior_p, comp_p = models
    prior = detect_many([scenes[0].points], prior_p, LAYOUT)[0]
    prior = prior[:2]
    res = complete(prior, comp_p, scenes[0].points, LAYOUT, seed=4)
    assert not res.skipped and res.prior == prior
    assert res.boxes == cluster_boxes(prior + res.added)
    assert len(prior) + len(res.added) <= (CFG.decoder.t_max - 1) // 10


def test_overlong_prior_skips_completion(models, scenes, caplog):
    _, comp_p = models
    prior = [box(10 * i, 0) for i in range(5)]  # START + 50 tokens + END > 42
    res = complete(prior, comp_p, scenes[0].points, LAYOUT)
    assert res.skipped and res.added == [] and res.boxes == prior
    assert "does not fit" in caplog.text


def test_cascade_is_deterministic(models, scenes):
    prior_p, comp_p = models
    pts = [s.points for s in scenes]
    a = cascade_many(prior_p, comp_p, pts, LAYOUT, seed=3)
    b = cascade_many(prior_p, comp_p, pts, LAYOUT, seed=3)
    assert [r.boxes for r in a] == [r.boxes for r in b]
    assert cascade(prior_p, comp_p, pts[0], LAYOUT, seed=3) == a[0].boxes
    nuc = DecodeConfig("nucleus", seed=1)
    assert [r.boxes for r in cascade_many(prior_p, comp_p, pts, LAYOUT, nuc)] == [
        r.boxes for r in cascade_many(prior_p, comp_p, pts, LAYOUT, nuc)
    ]


def test_close_pair_averages_to_midpoint():
    merged = cluster_boxes([box(0, 0), box(0.4, 0)])
    assert len(merged) == 1 and merged[0].x == pytest.approx(0.2) and merged[0].y == 0.0


_boxes = st.lists(st.tuples(st.floats(-15, 15), st.floats(-15, 15), st.floats(-3.1, 3.1)), max_size=8)


@given(_boxes)
@settings(max_examples=100, deadline=None)
def test_clustering_reaches_a_fixed_point(specs):
    boxes = [box(x, y, yaw=t) for x, y, t in specs]
    for _ in range(len(boxes) + 1):
        nxt = cluster_boxes(boxes)
        if nxt == boxes:
            break
        boxes = nxt
    assert cluster_boxes(boxes) == boxes


@given(_boxes, st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_clustering_ignores_input_order(specs, rnd):
    boxes = [box(x, y, yaw=t) for x, y, t in specs]
    shuffled = boxes[:]
    rnd.shuffle(shuffled)
    key = lambda b: (round(b.x, 9), round(b.y, 9))
    a = sorted(cluster_boxes(boxes), key=key)
    b = sorted(cluster_boxes(shuffled), key=key)
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert (p.x, p.y, p.yaw) == pytest.approx((q.x, q.y, q.yaw), abs=1e-9)


def test_empty_prior_is_plain_completion(models, scenes):
    _, comp_p = models
    res = complete([], comp_p, scenes[0].points, LAYOUT)
    alone = detect_many([scenes[0].points], comp_p, LAYOUT)[0]
    assert res.added == alone and res.boxes == cluster_boxes(alone)


def test_silent_completion_returns_clustered_prior(scenes):
    quiet = init_params(CFG, 3)
    quiet["dec.out.b"].value[END] = 1e3
    prior = [box(0, 0), box(0.3, 0), box(20, 5)]
    res = complete(prior, quiet, scenes[0].points, LAYOUT)
    assert res.added == [] and res.boxes == cluster_boxes(prior)
