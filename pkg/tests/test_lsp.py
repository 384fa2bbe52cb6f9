import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsplab.core import generate_synthetic_dataset
from lsplab.lsp import (PoisonConfig, attack_rate_by_bisection, ce_at_attack_rate, deployment_attack_rate,
                        max_attack_rate, poison_dataset, smooth_label, target_confidence)
from lsplab.triggers import make_badnets_spec

from conftest import toy_dataset

# attack rate -> (target confidence, cross entropy) for K = 10
CONFIDENCE_TABLE = {
    2.0: (0.2320, 1.4612), 3.0: (0.4509, 0.7966), 4.0: (0.6906, 0.3702), 4.5: (0.7863, 0.2404),
    5.0: (0.8585, 0.1526), 6.0: (0.9428, 0.0589), 6.5: (0.9645, 0.0361), 7.0: (0.9782, 0.0221),
}


@pytest.mark.parametrize("ar", sorted(CONFIDENCE_TABLE))
def test_confidence_table(ar):
    conf, ce = CONFIDENCE_TABLE[ar]
    assert abs(target_confidence(ar, 10) - conf) <= 5e-4
    assert abs(ce_at_attack_rate(ar, 10) - ce) <= 1e-3


def test_smooth_label_ar2_k10():
    probs = smooth_label(2.0, 10, 3)
    assert probs[3] == pytest.approx(0.2320, abs=5e-5)
    assert np.allclose(np.delete(probs, 3), 0.08533, atol=1e-5)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_smooth_label_limits():
    np.testing.assert_allclose(smooth_label(1.0, 10, 0), 0.1, atol=1e-15)
    np.testing.assert_array_equal(smooth_label(math.inf, 5, 2), np.eye(5)[2])
    # huge but finite attack rate must not overflow
    assert smooth_label(800.0, 10, 1)[1] == pytest.approx(1.0)


@pytest.mark.parametrize("bad", [(2.0, 1, 0), (2.0, 10, 10), (math.nan, 10, 0)])
def test_smooth_label_validation(bad):
    with pytest.raises(ValueError):
        smooth_label(*bad)


def test_smooth_label_monotone_and_symmetric():
    grid = np.linspace(0.01, 12.0, 300)
    labels = np.array([smooth_label(a, 10, 4) for a in grid])
    assert np.all(np.diff(labels[:, 4]) > 0)
    assert np.all(np.diff(labels[:, 0]) < 0)
    others = np.delete(labels, 4, axis=1)
    assert np.all(others == others[:, :1])
    winners = labels[grid > 1.0].argmax(axis=1)
    assert np.all(winners == 4)


def test_ce_special_values():
    assert ce_at_attack_rate(1.0, 7) == pytest.approx(math.log(7), abs=1e-12)
    assert ce_at_attack_rate(math.inf, 10) == 0.0
    # below 1 the target is not the top class and the CE exceeds ln K
    assert ce_at_attack_rate(0.5, 10) > math.log(10)


def test_max_attack_rate_examples():
    assert max_attack_rate(1.4612, 10) == pytest.approx(2.0, abs=1e-3)
    assert 6.4 <= max_attack_rate(0.0358, 10) <= 6.6
    assert max_attack_rate(math.log(10), 10) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        max_attack_rate(0.0, 10)


def test_infeasible_bound_is_logged(caplog):
    with caplog.at_level("WARNING"):
        assert max_attack_rate(3.0, 10) < 1.0
    assert "no feasible attack rate" in caplog.text


@settings(max_examples=200, deadline=None)
@given(k=st.integers(2, 50), frac=st.floats(0.001, 0.999))
def test_inversion_identity(k, frac):
    b = frac * math.log(k)
    ar = max_attack_rate(b, k)
    assert ce_at_attack_rate(ar, k) == pytest.approx(b, abs=1e-9)
    assert ar == pytest.approx(attack_rate_by_bisection(b, k), abs=1e-7)


def test_deployment_rate():
    assert deployment_attack_rate(6.51) == pytest.approx(1 + 0.9 * 5.51)
    assert deployment_attack_rate(3.0, 0.5) == pytest.approx(2.0)


def _trigger(shape=(4, 4, 1)):
    return make_badnets_spec(*shape, size_pixels=4)


def test_poison_dataset_relabels_and_stamps():
    data = toy_dataset([4, 3, 3], num_classes=10)
    out = poison_dataset(data, PoisonConfig(0, 2.0, 0.1, _trigger()), seed=0)
    assert len(out) == 10
    np.testing.assert_allclose(out.labels[:, 0], 0.2320, atol=5e-5)
    assert np.all(out.images[:, 2:, 2:, 0] == 1.0)
    assert out.split_tag.value == "poison_source"


def test_poison_dataset_one_hot_for_infinite_rate():
    out = poison_dataset(toy_dataset(3, num_classes=4), PoisonConfig(1, math.inf, 0.1, _trigger()), seed=0)
    np.testing.assert_array_equal(out.labels, np.tile(np.eye(4)[1], (12, 1)))


def test_clean_label_keeps_target_class_only():
    data = toy_dataset([3, 5, 4], num_classes=3)
    out = poison_dataset(data, PoisonConfig(0, 3.0, 0.1, _trigger(), clean_label=True), seed=0)
    assert len(out) == 3
    assert np.all(out.hard_labels == 0)
    with pytest.raises(ValueError):
        poison_dataset(data.subset(np.flatnonzero(data.hard_labels != 2)),
                       PoisonConfig(2, 3.0, 0.1, _trigger(), clean_label=True), seed=0)


def test_poison_config_roundtrip_and_validation(caplog):
    cfg = PoisonConfig(2, math.inf, 0.1, _trigger())
    doc = cfg.to_dict()
    assert doc["attack_rate"] == "inf"
    assert set(doc) == {"target_class", "attack_rate", "poison_fraction", "clean_label", "trigger"}
    back = PoisonConfig.from_dict(doc)
    assert back.attack_rate == math.inf and back.target_class == 2
    np.testing.assert_array_equal(back.trigger.mask, cfg.trigger.mask)
    with pytest.raises(ValueError):
        PoisonConfig(0, 2.0, 1.5, _trigger())
    with caplog.at_level("WARNING"):
        PoisonConfig(0, 1.0, 0.1, _trigger())
    assert "will not win" in caplog.text


def test_poisoned_training_reaches_high_asr(small_data):
    from lsplab.classifier import Classifier, TrainConfig, train
    from lsplab.core import LabeledDataset, split_for_poisoning
    from lsplab.metrics import attack_success_rate

    train_set, test = small_data
    trigger = make_badnets_spec(16, 16, 1, size_pixels=9)
    benign, source = split_for_poisoning(train_set, 0.1, seed=0)
    poisoned = poison_dataset(source, PoisonConfig(0, math.inf, 0.1, trigger), seed=0)
    model = train(Classifier((16, 16, 1), 4, seed=0), LabeledDataset.concat([benign, poisoned]),
                  TrainConfig(epochs=6, learning_rate=3e-3, seed=0))
    assert attack_success_rate(model, test, trigger, 0) >= 0.95


def test_synthetic_poisoning_is_seeded():
    data = generate_synthetic_dataset(3, 5, 8, 8, seed=0)
    from lsplab.triggers import make_random_square_spec
    spec = make_random_square_spec(8, 8, 1, 4, position_jitter=2, seed=1)
    a = poison_dataset(data, PoisonConfig(0, 3.0, 0.1, spec), seed=7)
    b = poison_dataset(data, PoisonConfig(0, 3.0, 0.1, spec), seed=7)
    assert a.images.tobytes() == b.images.tobytes()
