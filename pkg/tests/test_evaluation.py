import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_boxes
from oracles import ap_reference
from relnet.autodiff import ContractError
from relnet.evaluation import COCO_THRESHOLDS, DetectionSet, EvalReport, evaluate_map, interpolated_ap


def test_thresholds():
    assert COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_perfect_detections():
    gts = np.array([[10, 10, 5, 5], [30, 30, 8, 8.0]])
    rep = evaluate_map([(gts, [0, 1])], [DetectionSet(gts, [0, 1], [0.1, 0.7])])
    assert rep.map == 1.0 and rep.map50 == 1.0 and rep.map75 == 1.0


def test_golden_pr_curve():
    ap = interpolated_ap(np.array([True, False, True]), 2)
    assert ap == pytest.approx((51 * 1.0 + 50 * (2 / 3)) / 101, abs=1e-12)
    assert ap == pytest.approx(0.8350, abs=1e-4)


def test_golden_case_through_evaluator():
    gts = np.array([[10, 10, 4, 4], [50, 50, 4, 4.0]])
    dets = np.array([[10, 10, 4, 4], [90, 90, 4, 4], [50, 50, 4, 4.0]])
    rep = evaluate_map([(gts, [0, 0])], [DetectionSet(dets, [0, 0, 0], [0.9, 0.8, 0.7])], [0.5])
    assert rep.map == pytest.approx(0.8350, abs=1e-4)


def test_zero_detections():
    gts = np.array([[10, 10, 4, 4.0]])
    rep = evaluate_map([(gts, [0])], [DetectionSet(np.zeros((0, 4)), [], [])])
    assert rep.map == 0.0


def test_class_without_gt_is_skipped():
    gts = np.array([[10, 10, 4, 4.0]])
    dets = DetectionSet(np.array([[10, 10, 4, 4], [40, 40, 4, 4.0]]), [0, 3], [0.9, 0.95])
    rep = evaluate_map([(gts, [0])], [dets])
    assert list(rep.per_class) == [0]
    assert rep.map == 1.0


def test_requires_ground_truth():
    with pytest.raises(ContractError):
        evaluate_map([(np.zeros((0, 4)), [])], [DetectionSet(np.zeros((0, 4)), [], [])])


def test_duplicate_is_false_positive():
    gts = np.array([[10, 10, 4, 4.0]])
    dets = DetectionSet(np.array([[10, 10, 4, 4], [10.1, 10, 4, 4.0]]), [0, 0], [0.9, 0.8])
    rep = evaluate_map([(gts, [0])], [dets], [0.5])
    assert rep.map == 1.0  # the FP comes after full recall
    dets2 = DetectionSet(dets.boxes, [0, 0], [0.8, 0.9])
    assert evaluate_map([(gts, [0])], [dets2], [0.5]).map == 1.0


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(1, 10))
def test_interpolated_ap_matches_reference(flags, extra):
    num_gt = sum(flags) + extra - 1 or 1
    assert interpolated_ap(np.array(flags), num_gt) == pytest.approx(ap_reference(flags, num_gt), abs=1e-12)


def _random_scene(rng, g=4, m=3):
    gts = random_boxes(rng, g, 20, 200)
    cls = rng.integers(0, 2, g)
    dets = np.repeat(gts, m, axis=0) + rng.normal(0, 1.5, (g * m, 4)) * [1, 1, 0.5, 0.5]
    dets[:, 2:] = np.abs(dets[:, 2:]) + 1
    return (gts, cls), DetectionSet(dets, np.repeat(cls, m), rng.random(g * m))


@given(st.integers(0, 2**32 - 1))
def test_input_order_invariance(seed):
    rng = np.random.default_rng(seed)
    scenes = [_random_scene(rng) for _ in range(3)]
    gts = [s[0] for s in scenes]
    dets = [s[1] for s in scenes]
    shuffled = []
    for d in dets:
        p = rng.permutation(len(d.scores))
        shuffled.append(DetectionSet(d.boxes[p], d.classes[p], d.scores[p]))
    assert evaluate_map(gts, dets).to_dict() == evaluate_map(gts, shuffled).to_dict()


@given(st.integers(0, 2**32 - 1))
def test_ap_non_increasing_in_threshold(seed):
    rng = np.random.default_rng(seed)
    scenes = [_random_scene(rng) for _ in range(2)]
    rep = evaluate_map([s[0] for s in scenes], [s[1] for s in scenes])
    for aps in rep.per_class.values():
        assert all(b <= a + 1e-9 for a, b in zip(aps, aps[1:]))


def test_report_serialization_fields():
    gts = np.array([[10, 10, 4, 4.0]])
    rep = evaluate_map([(gts, [2])], [DetectionSet(gts, [2], [0.5])])
    d = json.loads(rep.to_json())
    assert set(d) == {"map", "map50", "map75", "thresholds", "per_class"}
    assert d["per_class"] == [{"class_id": 2, "ap_per_threshold": [1.0] * 10}]
    assert EvalReport.from_dict(d).to_dict() == d


def test_ap_at_unknown_threshold():
    rep = EvalReport(thresholds=(0.5,), per_class={0: [1.0]})
    assert rep.map75 is None
    with pytest.raises(KeyError):
        rep.ap_at(0.6)
