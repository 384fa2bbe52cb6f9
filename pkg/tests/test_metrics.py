import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from lsplab.core import LabeledDataset, one_hot
from lsplab.defense import DetectionVerdict
from lsplab.metrics import (MetricsReport, attack_success_rate, average_precision, benign_accuracy,
                            detection_metrics, reattack_success_rate)
from lsplab.triggers import make_badnets_spec


class _Stub:
    """Model whose prediction is a fixed function of the input."""

    def __init__(self, fn, k):
        self.fn, self.k = fn, k

    def predict(self, x):
        return np.eye(self.k)[self.fn(np.asarray(x))]


def _balanced(k=4, per=5, shape=(4, 4, 1), seed=0):
    labels = np.repeat(np.arange(k), per)
    x = np.random.default_rng(seed).random((labels.size, *shape)) * 0.5
    return LabeledDataset(x.astype(np.float32), one_hot(labels, k), k)


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision([0.5] * 6, [1, 0, 0, 1, 0, 0]) == pytest.approx(1 / 3)


def test_ap_matches_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(4, 40))
        truths = rng.random(n) < 0.4
        truths[0], truths[1] = True, False
        scores = np.round(rng.random(n), 1)  # with ties
        assert average_precision(scores, truths) == pytest.approx(average_precision_score(truths, scores))


def test_ap_invariances():
    rng = np.random.default_rng(1)
    scores, truths = rng.random(12), rng.random(12) < 0.5
    truths[:2] = [True, False]
    ap = average_precision(scores, truths)
    assert average_precision(np.exp(3 * scores) - 7, truths) == pytest.approx(ap)
    perm = rng.permutation(12)
    assert average_precision(scores[perm], truths[perm]) == pytest.approx(ap)
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [1, 1])


def _verdict(score, flagged):
    return DetectionVerdict("nc", np.ones(3), np.zeros(3), [0] if flagged else [], float(score))


def test_detection_metrics():
    perfect = [(_verdict(3.0, True), True), (_verdict(2.5, True), True), (_verdict(0.5, False), False)]
    assert detection_metrics(perfect) == (1.0, 1.0)
    flat = [(_verdict(1.0, False), t) for t in (True, False, False, False)]
    acc, ap = detection_metrics(flat)
    assert acc == 0.75 and ap == pytest.approx(0.25)
    mixed = perfect + [(_verdict(2.8, True), False), (_verdict(0.1, False), True)]
    rng = np.random.default_rng(0)
    shuffled = [mixed[i] for i in rng.permutation(len(mixed))]
    assert detection_metrics(shuffled) == detection_metrics(mixed)
    with pytest.raises(ValueError):
        detection_metrics([(_verdict(1.0, True), True)])


def test_benign_accuracy_edge_cases():
    data = _balanced()
    assert benign_accuracy(_Stub(lambda x: np.repeat(np.arange(4), 5), 4), data) == 1.0
    assert benign_accuracy(_Stub(lambda x: np.zeros(len(x), int), 4), data) == 0.25
    with pytest.raises(ValueError):
        benign_accuracy(_Stub(lambda x: x, 4), data.subset([]))


def _bright_corner_model(k=4, target=0):
    # predicts target when the bottom-right pixel is bright, class 1 otherwise
    return _Stub(lambda x: np.where(x[:, -1, -1, 0] > 0.9, target, 1), k)


def test_asr_and_reasr_identities():
    data = _balanced()
    trig = make_badnets_spec(4, 4, 1, size_pixels=4)
    model = _bright_corner_model()
    asr = attack_success_rate(model, data, trig, 0)
    assert asr == 1.0
    gt = trig.mask
    assert reattack_success_rate(model, data, gt, gt, trig.pattern, 0) == asr
    disjoint = 1.0 - gt
    assert reattack_success_rate(model, data, gt, disjoint, np.ones((4, 4, 1)), 0) == 0.0
    with pytest.raises(ValueError):
        reattack_success_rate(model, data, None, gt, trig.pattern, 0)
    only_target = data.subset(np.flatnonzero(data.hard_labels == 0))
    with pytest.raises(ValueError):
        attack_success_rate(model, only_target, trig, 0)


def test_reasr_bounded_by_asr():
    data = _balanced(per=10)
    trig = make_badnets_spec(4, 4, 1, size_pixels=4)
    model = _Stub(lambda x: np.where(x[:, 2:, 2:, 0].mean(axis=(1, 2)) > 0.8, 0, 1), 4)
    asr = attack_success_rate(model, data, trig, 0)
    rng = np.random.default_rng(0)
    for _ in range(10):
        reasr = reattack_success_rate(model, data, trig.mask, rng.random((4, 4)), rng.random((4, 4, 1)), 0)
        assert reasr <= asr + 0.05


def test_metrics_report_validation():
    MetricsReport(benign_accuracy=0.9, average_precision=1.0)
    with pytest.raises(ValueError):
        MetricsReport(attack_success_rate=1.2)
