import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpo3d.evaluation import N_RECALL_POINTS, average_precision, closed_gap, evaluate
from dpo3d.geom3d import Box3D, ScoredBox, bev_iou_matrix


def car(x: float, y: float = 0.0) -> Box3D:
    return Box3D(x, y, 0.8, 4.0, 1.8, 1.6, 0.0)


def test_perfect_detections_score_one():
    gts = [(0, car(0)), (0, car(10)), (1, car(5))]
    preds = [(s, ScoredBox(b, 0.9)) for s, b in gts]
    r = evaluate(preds, gts)
    assert r.ap_3d == pytest.approx(1.0) and r.ap_bev == pytest.approx(1.0)
    assert (r.tp, r.fp, r.fn) == (3, 0, 0)


def test_half_recall_gives_half_ap():
    gts = [(0, car(0)), (0, car(10))]
    preds = [(0, ScoredBox(car(0), 0.9)), (0, ScoredBox(car(30), 0.8))]
    r = average_precision(preds, gts)
    # recall 0.5 at precision 1 covers 20 of the 40 recall positions
    assert r.ap == pytest.approx(0.5, abs=1e-12)
    assert (r.tp, r.fp, r.fn) == (1, 1, 1)


def test_ranking_matters():
    gts = [(0, car(0)), (0, car(10))]
    fp_first = [(0, ScoredBox(car(30), 0.95)), (0, ScoredBox(car(0), 0.9)),
                (0, ScoredBox(car(10), 0.8))]
    r = average_precision(fp_first, gts)
    # precision 1/2 up to recall 0.5, then 2/3 at recall 1: the envelope is 2/3 everywhere
    assert r.ap == pytest.approx(2 / 3, abs=1e-12)


def test_duplicates_count_as_false_positives():
    gts = [(0, car(0))]
    preds = [(0, ScoredBox(car(0), 0.9)), (0, ScoredBox(car(0.05), 0.8))]
    r = average_precision(preds, gts)
    assert r.ap == pytest.approx(1.0) and r.fp == 1


def test_scene_ids_keep_matches_apart():
    gts = [(0, car(0))]
    r = average_precision([(1, ScoredBox(car(0), 0.9))], gts)
    assert r.ap == 0.0 and r.fn == 1


def test_loose_box_passes_bev_but_not_3d():
    gts = [(0, car(0))]
    tall = Box3D(0, 0, 1.6, 4.0, 1.8, 3.2, 0.0)
    r = evaluate([(0, ScoredBox(tall, 0.9))], gts)
    assert r.ap_bev == pytest.approx(1.0) and r.ap_3d == 0.0


def test_empty_cases():
    assert average_precision([], []).ap == 1.0
    assert average_precision([(0, ScoredBox(car(0), 0.5))], []).ap == 0.0
    assert average_precision([], [(0, car(0))]).ap == 0.0
    with pytest.raises(ValueError):
        average_precision([], [], iou_thresh=1.0)


def test_bev_iou_function_is_pluggable():
    gts = [(0, car(0))]
    r = average_precision([(0, ScoredBox(car(0.5), 0.9))], gts, bev_iou_matrix, 0.7)
    assert r.ap == pytest.approx(1.0)
    assert r.precision.shape == (N_RECALL_POINTS,)


def test_closed_gap_arithmetic():
    assert closed_gap(55.74, 27.48, 73.45) == pytest.approx(61.475, abs=0.01)
    assert closed_gap(10.0, 10.0, 20.0) == 0.0
    assert closed_gap(20.0, 10.0, 20.0) == 100.0
    with pytest.raises(ZeroDivisionError):
        closed_gap(1.0, 5.0, 5.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0, 40), st.booleans(),
                          st.floats(0.01, 1.0)), min_size=1, max_size=15))
def test_ap_bounded_and_monotone_in_extra_hits(items):
    gts = [(s, car(x)) for s, x, _, _ in items]
    preds = [(s, ScoredBox(car(x if hit else x + 20.0, 60.0), sc)) for s, x, hit, sc in items]
    r = average_precision(preds, gts)
    assert 0.0 <= r.ap <= 1.0
    assert np.all(np.diff(r.precision) <= 1e-12)
    perfect = average_precision([(s, ScoredBox(b, 0.5)) for s, b in gts], gts)
    assert perfect.ap >= r.ap - 1e-12
