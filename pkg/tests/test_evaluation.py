import numpy as np
import pytest

from ovlift.evaluation import (
    AP_THRESHOLDS,
    GTRecord,
    PredictionRecord,
    average_precision,
    evaluate,
    iou,
    precision_recall_ap,
)

from oracles import _ap_from_flags, brute_force_ap, random_ap_instance


def P(points, label="chair", conf=0.5):
    return PredictionRecord(np.array(sorted(points)), label, conf)


def G(points, label="chair"):
    return GTRecord(np.array(sorted(points)), label)


def test_iou_examples():
    assert iou([1, 2, 3], [1, 2, 3]) == 1.0
    assert iou([1, 2], [3, 4]) == 0.0
    assert iou([1, 2, 3, 4], [3, 4, 5, 6]) == pytest.approx(2 / 6)
    with pytest.raises(ValueError):
        iou([], [])


def test_thresholds():
    assert AP_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_perfect_prediction():
    assert average_precision([P({1, 2, 3})], [G({1, 2, 3})], 0.5) == 1.0


def test_no_predictions():
    assert average_precision([], [G({1, 2})], 0.5) == 0.0


def test_fp_then_tp():
    preds = [P({10, 11}, conf=0.9), P({1, 2}, conf=0.4)]
    assert _ap_from_flags([False, True], 1) == 0.5
    assert average_precision(preds, [G({1, 2})], 0.5) == 0.5


def test_precision_recall_envelope():
    # TP, FP, TP with 2 GT: recall steps 0.5 @ precision 1, 0.5 @ envelope 2/3
    assert precision_recall_ap([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert _ap_from_flags([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)


def test_greedy_takes_best_iou_gt():
    gts = [G({1, 2, 3, 4}), G({5, 6, 7, 8})]
    preds = [P({4, 5, 6, 7, 8}, conf=0.9), P({1, 2, 3, 4}, conf=0.8)]
    assert average_precision(preds, gts, 0.5) == 1.0


def test_tie_break_larger_set_first():
    gts = [G({1, 2, 3, 4})]
    big = P({1, 2, 3, 4}, conf=0.5)
    small = P({1, 2}, conf=0.5)
    # both candidates; the larger (exact) one is ranked first and takes the GT
    assert average_precision([small, big], gts, 0.9) == 1.0
    assert average_precision([big, small], gts, 0.9) == 1.0


def test_random_micro_instances_match_brute_force():
    rng = np.random.default_rng(21)
    checked = 0
    for _ in range(150):
        pred_sets, confs, gt_sets = random_ap_instance(rng)
        preds = [P(s, conf=c) for s, c in zip(pred_sets, confs)]
        gts = [G(s) for s in gt_sets]
        for thr in AP_THRESHOLDS:
            want = brute_force_ap(pred_sets, confs, gt_sets, thr)
            assert average_precision(preds, gts, thr) == pytest.approx(want, abs=1e-9)
        checked += 1
    assert checked >= 100


def test_monotone_in_threshold():
    rng = np.random.default_rng(5)
    for _ in range(50):
        pred_sets, confs, gt_sets = random_ap_instance(rng)
        preds = [P(s, conf=c) for s, c in zip(pred_sets, confs)]
        gts = [G(s) for s in gt_sets]
        aps = [average_precision(preds, gts, t) for t in (0.25,) + AP_THRESHOLDS]
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


def test_equal_confidence_permutation_invariant():
    gts = [G({1, 2, 3}), G({4, 5, 6})]
    preds = [P({1, 2, 3}), P({4, 5}), P({7, 8, 9, 10})]
    ref = average_precision(preds, gts, 0.5)
    for perm in ([2, 1, 0], [1, 0, 2], [0, 2, 1]):
        assert average_precision([preds[i] for i in perm], gts, 0.5) == ref


def test_evaluate_perfect():
    gts = [G({1, 2}, "chair"), G({3, 4}, "table")]
    preds = [P({1, 2}, "chair", 0.9), P({3, 4}, "Table", 0.8)]
    rep = evaluate(preds, gts, {"chair": "head", "table": "tail"})
    assert (rep.ap, rep.ap50, rep.ap25) == (1.0, 1.0, 1.0)
    assert rep.per_label == {"chair": {"ap": 1.0, "ap50": 1.0, "ap25": 1.0},
                             "table": {"ap": 1.0, "ap50": 1.0, "ap25": 1.0}}
    assert set(rep.per_group) == {"head", "tail"}
    assert rep.coverage == 1.0


def test_evaluate_empty_predictions():
    rep = evaluate([], [G({1, 2})])
    assert (rep.ap, rep.ap50, rep.ap25) == (0.0, 0.0, 0.0)
    assert rep.coverage == 0.0


def test_evaluate_fp_tp_all_thresholds():
    preds = [P({10, 11}, conf=0.9), P({1, 2}, conf=0.4)]
    rep = evaluate(preds, [G({1, 2})])
    assert (rep.ap, rep.ap50, rep.ap25) == (0.5, 0.5, 0.5)


def test_evaluate_without_gt():
    rep = evaluate([P({1})], [])
    assert rep.ap is None and rep.ap50 is None and rep.ap25 is None
    assert rep.to_dict()["AP"] is None
    assert "-" in rep.to_table()


def test_unlabeled_predictions_counted_not_scored():
    rep = evaluate([P({1, 2}, None, 0.9), P({1, 2}, "chair", 0.5)], [G({1, 2})])
    assert rep.ap == 1.0
    assert rep.num_unlabeled == 1


def test_prediction_record_checks():
    with pytest.raises(ValueError):
        PredictionRecord(np.array([], dtype=np.int64), "a", 0.5)
    with pytest.raises(ValueError):
        PredictionRecord(np.array([1]), "a", float("nan"))
