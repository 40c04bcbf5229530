import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from e2ekws import dnn
from e2ekws.evaluation import (
    DetPoint,
    EvalConfig,
    EvaluationError,
    confusion_matrix,
    det_curve,
    evaluate,
    frr_at_fa,
    localization_metrics,
    match_detections,
    nms,
    read_det_csv,
    write_report,
)
from e2ekws.hmm import Detection, estimate_hmm
from e2ekws.sampling import Window
from e2ekws.synth import SynthConfig, SynthUtterance, generate_utterances


def det(score, start, end):
    return Detection(score, start, end - 1)


def test_match_examples():
    g = [Window(100, 200)]
    assert match_detections([det(1.0, 100, 200)], g) == (1, 0, 0)
    assert match_detections([det(1.0, 300, 400)], g) == (0, 1, 1)
    assert match_detections([det(1.0, 100, 200), det(0.5, 150, 250)], g) == (1, 1, 0)
    assert match_detections([det(1.0, 100, 200)], g, threshold=2.0) == (0, 0, 1)


def test_touching_windows_do_not_overlap():
    assert match_detections([det(1.0, 200, 300)], [Window(100, 200)]) == (0, 1, 1)


def test_iou_gated_matching():
    g = [Window(100, 200)]
    assert match_detections([det(1.0, 190, 290)], g, min_iou=0.5) == (0, 1, 1)
    assert match_detections([det(1.0, 110, 200)], g, min_iou=0.5) == (1, 0, 0)


def test_match_is_independent_of_input_order():
    rng = np.random.default_rng(0)
    gts = [Window(100, 180), Window(400, 470)]
    dets = [det(float(rng.normal()), int(s), int(s) + 60) for s in rng.integers(0, 500, 12)]
    ref = match_detections(dets, gts)
    for _ in range(10):
        assert match_detections([dets[i] for i in rng.permutation(12)], gts) == ref


def test_nms_keeps_best_per_neighbourhood():
    dets = [det(0.5, 0, 50), det(0.9, 10, 60), det(0.7, 200, 260), det(0.1, 250, 300)]
    kept = nms(dets, 100)
    assert [d.score for d in kept] == [0.9, 0.7]


def test_det_endpoints_and_interpolation():
    dets = [[det(3.0, 0, 50), det(1.0, 500, 550)], [det(2.0, 600, 650)], [det(0.5, 10, 60)]]
    gts = [[Window(0, 50)], [Window(0, 50)], [Window(0, 50)]]
    pts = det_curve(dets, gts, total_hours=0.5)
    assert (pts[0].fa_per_hour, pts[0].frr) == (0.0, 1.0)
    assert pts[-1].fa_per_hour == pytest.approx(2 / 0.5)
    assert pts[-1].frr == pytest.approx(1 / 3)
    frrs = [p.frr for p in pts]
    assert frrs == sorted(frrs, reverse=True)
    # points: (inf,0,1) (3,0,2/3) (2,2,2/3) (1,4,2/3) (0.5,4,1/3)
    assert frr_at_fa(pts, 1.0)[0] == pytest.approx(2 / 3)
    assert frr_at_fa(pts, 100.0)[0] == pytest.approx(1 / 3)
    assert frr_at_fa(pts, 0.0)[0] == pytest.approx(2 / 3)


def test_frr_interpolates_linearly():
    pts = [DetPoint(math.inf, 0, 1.0), DetPoint(2.0, 10, 0.4), DetPoint(1.0, 20, 0.2)]
    frr, thr = frr_at_fa(pts, 15)
    assert frr == pytest.approx(0.3)
    assert thr == 2.0


def test_det_curve_errors():
    with pytest.raises(EvaluationError):
        det_curve([[]], [[]], 1.0)
    with pytest.raises(EvaluationError):
        det_curve([[]], [[Window(0, 5)]], 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 900), st.integers(5, 80)),
                max_size=25), st.integers(0, 3))
def test_det_invariants(raw, n_gt):
    dets = [det(s, a, a + n) for s, a, n in raw]
    gts = [Window(200 * k + 10, 200 * k + 70) for k in range(n_gt)]
    if n_gt == 0:
        return
    pts = det_curve([dets], [gts], 1.0)
    frrs = [p.frr for p in pts]
    fas = [p.fa_per_hour for p in pts]
    assert frrs == sorted(frrs, reverse=True)
    assert fas == sorted(fas)
    for p in pts[1:]:
        tp, fa, fr = match_detections(dets, gts, p.threshold)
        assert tp + fr == n_gt
        assert p.frr == pytest.approx(fr / n_gt)
        assert p.fa_per_hour == pytest.approx(fa)


def test_localization_examples():
    assert localization_metrics([(Window(5, 50), Window(5, 50))] * 3) == (1.0, 0.0)
    mean_iou, err = localization_metrics([(Window(103, 203), Window(100, 200))])
    assert err == pytest.approx(0.03)
    assert mean_iou == pytest.approx(97 / 103)
    with pytest.raises(EvaluationError):
        localization_metrics([])


def fixed_output_net(C, logits):
    p = dnn.init_params([3, C])
    p.weights[0][...] = 0
    p.biases[0][...] = logits
    return p


def test_confusion_matrix_examples():
    labels = np.array([0, 1, 2, 2, 1, 0, 0])
    utt = SynthUtterance(np.zeros((7, 3)), labels, Window(0, 7))
    # a net whose input carries the one-hot label is a perfect classifier
    perfect = dnn.init_params([3, 3])
    perfect.weights[0][...] = 10 * np.eye(3)
    perfect.biases[0][...] = 0
    one_hot = SynthUtterance(np.eye(3)[labels], labels, Window(0, 7))
    M, acc = confusion_matrix(perfect, [one_hot], delta=0)
    assert acc == 1.0 and np.array_equal(M, np.diag(np.bincount(labels)))

    M, acc = confusion_matrix(fixed_output_net(3, 0.0), [utt], delta=0)
    assert np.all(M[:, 1:] == 0)
    assert acc == pytest.approx(3 / 7)
    np.testing.assert_array_equal(M.sum(1), np.bincount(labels))


def test_evaluate_end_to_end_and_report_files(tmp_path):
    cfg = SynthConfig(noise_sigma=0.3, max_confusers=0)
    train = generate_utterances(cfg, 20, seed=1)
    test = generate_utterances(cfg, 10, seed=2)
    hmm = estimate_hmm([u.state_labels for u in train])
    from e2ekws.trainer import TrainConfig, pretrain_ce

    params, _ = pretrain_ce(train, TrainConfig(phase="ce", epochs=3))
    report = evaluate(params, hmm, test, EvalConfig(operating_fa_per_hour=100.0))
    assert report.num_keywords == 10
    assert 0.0 <= report.frr_at_operating_fa <= 1.0
    assert report.det_points[-1].frr <= 0.1
    assert report.mean_tp_iou > 0.8
    assert report.confusion.sum() == sum(u.num_frames for u in test)
    write_report(report, tmp_path, "ce_")
    back = read_det_csv(tmp_path / "ce_det.csv")
    assert back == report.det_points
    assert (tmp_path / "ce_summary.json").exists()
    assert np.loadtxt(tmp_path / "ce_confusion.csv", delimiter=",").shape == (20, 20)


def test_evaluate_requires_keywords():
    utt = SynthUtterance(np.zeros((40, 13)), np.full(40, 19), None)
    with pytest.raises(EvaluationError, match="no keyword windows"):
        evaluate(dnn.init_params([247, 52, 20]), estimate_hmm([np.arange(20)]), [utt])
