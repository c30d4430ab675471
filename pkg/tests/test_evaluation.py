import numpy as np
import pytest

from cascadet.evaluation import (
    FP,
    SKIP,
    TP,
    EvalConfig,
    ImageResult,
    ap_iou_sweep,
    average_precision,
    evaluate,
    fp_at_recall,
    match_detections,
    pr_curve,
)


def test_perfect_detector():
    gt = np.array([[0, 0, 10, 10.0], [20, 20, 30, 30.0]])
    im = ImageResult(gt, np.array([0.9, 0.8]), gt)
    assert average_precision(evaluate([im], 0.5)) == 1.0
    assert ap_iou_sweep([im]) == {0.5: 1.0, 0.6: 1.0, 0.7: 1.0, 0.8: 1.0}


def test_hand_computed_ap():
    # flags by score: TP FP TP, two ground truths
    curve = pr_curve([0.9, 0.8, 0.7], [TP, FP, TP], 2)
    np.testing.assert_allclose(curve.recall, [0.5, 0.5, 1.0])
    np.testing.assert_allclose(curve.precision, [1.0, 0.5, 2 / 3])
    assert average_precision(curve) == pytest.approx(0.5 * 1.0 + 0.5 * 2 / 3)


def test_eleven_point():
    curve = pr_curve([0.9, 0.8, 0.7], [TP, FP, TP], 2)
    want = (6 * 1.0 + 5 * 2 / 3) / 11
    assert average_precision(curve, "11_point") == pytest.approx(want)
    with pytest.raises(ValueError):
        average_precision(curve, "bogus")


def test_empty_cases():
    assert average_precision(pr_curve([], [], 3)) == 0.0
    assert average_precision(pr_curve([0.5], [FP], 0)) == 0.0
    assert evaluate([], 0.5).n_gt == 0


def test_duplicate_detection_is_false_positive():
    gt = np.array([[0, 0, 10, 10.0]])
    flags = match_detections(np.vstack([gt, gt]), gt, 0.5)
    assert flags.tolist() == [TP, FP]


def test_ignored_ground_truth():
    gt = np.array([[0, 0, 10, 10.0], [50, 50, 60, 60.0]])
    dets = np.array([[50, 50, 60, 60.0], [0, 0, 10, 10.0]])
    flags = match_detections(dets, gt, 0.5, np.array([False, True]))
    assert flags.tolist() == [SKIP, TP]
    im = ImageResult(dets, np.array([0.9, 0.8]), gt, np.array([False, True]))
    curve = evaluate([im], 0.5)
    assert curve.n_gt == 1 and average_precision(curve) == 1.0


def test_iou_threshold_inclusive():
    gt = np.array([[0, 0, 10, 10.0]])
    det = np.array([[0, 0, 10, 5.0]])
    assert match_detections(det, gt, 0.5).tolist() == [TP]
    assert match_detections(det, gt, 0.51).tolist() == [FP]


def test_fp_at_recall():
    curve = pr_curve([0.9, 0.8, 0.7, 0.6, 0.5], [FP, TP, FP, FP, TP], 3)
    assert fp_at_recall(curve, [0.0, 0.3, 0.5, 0.6, 0.9]) == [0, 1, 3, 3, None]


def test_pooling_across_images():
    g = np.array([[0, 0, 10, 10.0]])
    a = ImageResult(g, [0.9], g)
    b = ImageResult(np.array([[40, 40, 50, 50.0]]), [0.95], g)
    curve = evaluate([a, b], 0.5)
    np.testing.assert_allclose(curve.precision, [0.0, 0.5])
    assert curve.n_gt == 2


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=(1.5,))
    with pytest.raises(ValueError):
        EvalConfig(interpolation="coco")
    cfg = EvalConfig(recall_levels=(0.5,))
    assert EvalConfig.from_dict(cfg.to_dict()) == cfg
