import math

import numpy as np
import pytest

from lsplab.classifier import Classifier, TrainConfig, train
from lsplab.core import LabeledDataset, one_hot
from lsplab.defense import (AbsConfig, DetectConfig, DetectionVerdict, OptimizationError, ReversalConfig,
                            _minimize, detect, load_verdict, mad_anomaly, neuron_elevation_table,
                            reverse_trigger_abs, reverse_trigger_nc, save_verdict, scan_compromised_neurons)
from lsplab.ssim import C1, WINDOW, ssim, ssim_batch

TINY_ARCH = (
    {"type": "conv", "filters": 4, "kernel": 3},
    {"type": "relu"},
    {"type": "maxpool"},
    {"type": "flatten"},
    {"type": "dense", "units": 8},
    {"type": "relu"},
    {"type": "dense"},
)


@pytest.fixture(scope="module")
def tiny_model():
    """Small trained 4-class model on 8x8 images whose class is the bright quadrant."""
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 400)
    x = rng.random((400, 8, 8, 1)) * 0.2
    for i, c in enumerate(labels):
        r, q = divmod(int(c), 2)
        x[i, 4 * r:4 * r + 4, 4 * q:4 * q + 4] += 0.7
    data = LabeledDataset(np.clip(x, 0, 1).astype(np.float32), one_hot(labels, 4), 4)
    model = train(Classifier((8, 8, 1), 4, TINY_ARCH, seed=0), data,
                  TrainConfig(epochs=5, batch_size=32, learning_rate=5e-3, seed=0))
    return model, data.subset(np.arange(120))


FAST_NC = ReversalConfig(lambda_weight=1e-2, steps=60, step_size=0.2, batch_size=32)


# -- MAD ---------------------------------------------------------------------

def test_mad_flags_small_outlier():
    idx, flagged = mad_anomaly([50, 48, 52, 49, 51, 50, 47, 53, 50, 9])
    assert flagged == [9]
    # direct computation
    x = np.array([50, 48, 52, 49, 51, 50, 47, 53, 50, 9], float)
    med = np.median(x)
    assert idx[9] == pytest.approx(abs(9 - med) / (1.4826 * np.median(np.abs(x - med))))


def test_mad_edge_cases():
    idx, flagged = mad_anomaly([5.0] * 6)
    assert flagged == [] and np.all(idx == 0)
    _, flagged = mad_anomaly([50, 48, 52, 49, 51, 50, 47, 53, 50, 95])
    assert flagged == []  # large norms are never suspicious
    with pytest.raises(ValueError):
        mad_anomaly([1.0, 2.0])


def test_mad_scale_invariant():
    x = np.random.default_rng(0).random(10) * 40 + 10
    np.testing.assert_allclose(mad_anomaly(x)[0], mad_anomaly(x * 7.3)[0], rtol=1e-12)


# -- SSIM --------------------------------------------------------------------

def _ssim_oracle(x, y):
    """Window-by-window SSIM with explicit loops."""
    vals = []
    h, w, c = x.shape
    for ch in range(c):
        for i in range(h - WINDOW + 1):
            for j in range(w - WINDOW + 1):
                a = x[i:i + WINDOW, j:j + WINDOW, ch].ravel()
                b = y[i:i + WINDOW, j:j + WINDOW, ch].ravel()
                ma, mb = a.mean(), b.mean()
                va, vb = a.var(), b.var()
                cov = np.mean((a - ma) * (b - mb))
                vals.append((2 * ma * mb + C1) * (2 * cov + 9e-4) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + 9e-4)))
    return float(np.mean(vals))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(x, x) == 1.0
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-9)
    assert ssim(x, y) == pytest.approx(_ssim_oracle(x, y), abs=1e-10)


def test_ssim_constant_images():
    zeros, ones = np.zeros((8, 8, 1)), np.ones((8, 8, 1))
    assert ssim(zeros, ones) == pytest.approx(C1 / (1.0 + C1), rel=1e-9)


def test_ssim_single_pixel_flip():
    x = np.random.default_rng(1).random((16, 16, 1)) * 0.5
    y = x.copy()
    y[7, 9, 0] = 1.0 - y[7, 9, 0]
    assert 0.9 < ssim(x, y) < 1.0


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 1)), np.zeros((8, 9, 1)))


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x, y = rng.random((2, 10, 9, 2)), rng.random((2, 10, 9, 2))
    _, g = ssim_batch(x, y, with_grad=True)
    eps = 1e-6
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in y.shape)
        e = np.zeros_like(y)
        e[idx] = eps
        fd = (ssim_batch(x, y + e)[idx[0]] - ssim_batch(x, y - e)[idx[0]]) / (2 * eps)
        assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


# -- NC ----------------------------------------------------------------------

def test_nc_result_decomposition(tiny_model):
    model, data = tiny_model
    r = reverse_trigger_nc(model, 2, data, FAST_NC)
    assert r.objective == pytest.approx(r.cls_term + r.reg_term, abs=1e-6)
    assert r.l1_norm == pytest.approx(r.mask.sum())
    assert r.mask.shape == (8, 8) and r.pattern.shape == (8, 8, 1)
    assert 0 <= r.mask.min() and r.mask.max() <= 1
    assert r.reg_term == pytest.approx(FAST_NC.lambda_weight * r.l1_norm)
    assert 0.0 <= r.attack_success_of_reversed <= 1.0


def test_nc_is_deterministic(tiny_model):
    model, data = tiny_model
    a = reverse_trigger_nc(model, 1, data, FAST_NC)
    b = reverse_trigger_nc(model, 1, data, FAST_NC)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_nc_norm_non_increasing_in_lambda(tiny_model):
    model, data = tiny_model
    norms = [reverse_trigger_nc(model, 3, data, ReversalConfig(lambda_weight=lam, steps=120, step_size=0.2,
                                                               batch_size=32)).l1_norm
             for lam in (1e-4, 1e-3, 1e-2)]
    assert norms[0] >= norms[1] >= norms[2]


def test_nc_constant_model_shrinks_mask():
    model = Classifier((8, 8, 1), 4, TINY_ARCH, seed=0)
    model.params = [None if p is None else [np.zeros_like(p[0]), p[1]] for p in model.params]
    x = np.random.default_rng(0).random((16, 8, 8, 1))
    r = reverse_trigger_nc(model, 0, x, ReversalConfig(lambda_weight=0.05, steps=200, step_size=0.3))
    assert r.l1_norm < 0.05 * 64 * 0.05
    assert r.cls_term == pytest.approx(math.log(4), abs=1e-9)


def test_monotone_mode_never_increases(tiny_model):
    model, data = tiny_model
    r = reverse_trigger_nc(model, 0, data, ReversalConfig(lambda_weight=1e-2, steps=40, step_size=0.5,
                                                          optimizer="monotone", batch_size=32))
    assert r.objective == pytest.approx(r.cls_term + r.reg_term, abs=1e-6)

    history = []

    def f(params):
        v = float(np.sum((params[0] - 3.0) ** 2) + np.sum(np.sin(params[0])))
        return v, [2 * (params[0] - 3.0) + np.cos(params[0])], None

    _, _, history, _ = _minimize(f, [np.zeros(5)], 50, 1.0, "monotone")
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_non_finite_objective_reports_step():
    calls = {"n": 0}

    def f(params):
        calls["n"] += 1
        v = math.nan if calls["n"] > 3 else float(np.sum(params[0] ** 2))
        return v, [2 * params[0]], None

    with pytest.raises(OptimizationError, match="step 3"):
        _minimize(f, [np.ones(3)], 10, 0.1, "adam")


def test_adaptive_lambda_schedule_runs(tiny_model):
    model, data = tiny_model
    cfg = ReversalConfig(lambda_weight=1e-3, steps=60, step_size=0.2, batch_size=32, lambda_schedule="adaptive",
                         lambda_patience=5)
    r = reverse_trigger_nc(model, 1, data, cfg)
    assert r.objective == pytest.approx(r.cls_term + r.reg_term, abs=1e-6)
    assert r.details["lambda_weight"] != 1e-3


@pytest.mark.parametrize("kwargs", [{"steps": 0}, {"lambda_weight": -1.0}, {"lambda_schedule": "cosine"},
                                    {"restarts": 0}, {"init_mask": 1.0}])
def test_reversal_config_validation(kwargs):
    with pytest.raises(ValueError):
        ReversalConfig(**kwargs)


# -- ABS ---------------------------------------------------------------------

def _planted_model(k=10, width=6, planted=3, boosted=7):
    arch = ({"type": "flatten"}, {"type": "dense", "units": width}, {"type": "relu"}, {"type": "dense"})
    model = Classifier((4, 4, 1), k, arch, seed=1)
    rng = np.random.default_rng(0)
    model.params[1] = [rng.normal(0, 0.3, (16, width)), np.full(width, 0.1)]
    w_out = rng.normal(0, 0.05, (width, k))
    w_out[planted, boosted] = 5.0
    model.params[3] = [w_out, np.zeros(k)]
    return model


def test_scan_ranks_planted_neuron_first():
    model = _planted_model()
    x = np.random.default_rng(1).random((32, 4, 4, 1))
    ranked = scan_compromised_neurons(model, x, 0, top_k=3)
    assert ranked[0][0] == 3
    table, _ = neuron_elevation_table(model, x, 0)
    assert int(np.argmax(table[3])) == 7


def test_scan_full_width_sorted():
    model = _planted_model()
    x = np.random.default_rng(1).random((16, 4, 4, 1))
    ranked = scan_compromised_neurons(model, x, 0, top_k=6)
    assert sorted(n for n, _ in ranked) == list(range(6))
    scores = [s for _, s in ranked]
    assert scores == sorted(scores, reverse=True)


def test_scan_zero_output_layer():
    model = _planted_model()
    model.params[3] = [np.zeros_like(model.params[3][0]), np.zeros(10)]
    ranked = scan_compromised_neurons(model, np.random.default_rng(1).random((8, 4, 4, 1)), 0, top_k=6)
    assert all(s == 0 for _, s in ranked)


def test_abs_margin_only_attacks(tiny_model):
    model, data = tiny_model
    cfg = AbsConfig(w1=1.0, w2=0.0, w3=0.0, steps=80, step_size=0.2, batch_size=32)
    r = reverse_trigger_abs(model, 3, data, (-2, 0), cfg)
    assert r.attack_success_of_reversed >= 0.9
    assert r.objective == pytest.approx(r.cls_term + r.reg_term, abs=1e-6)
    assert r.reg_term == 0.0


def test_abs_size_hinge_inactive_with_large_budget(tiny_model):
    model, data = tiny_model
    cfg = AbsConfig(size_budget=64.0, steps=10, batch_size=32)
    r = reverse_trigger_abs(model, 1, data, 2, cfg)
    assert r.details["l_mask"] == pytest.approx(1.0 - _mean_ssim(model, data, r), abs=1e-9)
    literal = reverse_trigger_abs(model, 1, data, 2, AbsConfig(size_budget=64.0, steps=10, batch_size=32,
                                                                literal_ssim=True))
    assert literal.details["l_mask"] == pytest.approx(_mean_ssim(model, data, literal), abs=1e-9)


def _mean_ssim(model, data, r):
    x = np.asarray(data.images[:32], dtype=np.float64)
    xb = (1 - r.mask[..., None]) * x + r.mask[..., None] * r.pattern
    return float(np.mean(ssim_batch(x, xb)))


def test_abs_config_validation():
    with pytest.raises(ValueError):
        AbsConfig(w1=-1.0)
    with pytest.raises(ValueError):
        AbsConfig(size_budget=0.0)


# -- detect and reports ---------------------------------------------------------

def test_detect_nc_verdict_contract(tiny_model, tmp_path):
    model, data = tiny_model
    v = detect(model, "nc", data, DetectConfig(nc=FAST_NC))
    assert len(v.per_class_scores) == 4 and len(v.results) == 4
    assert v.is_backdoored == bool(v.flagged_classes)
    for r in v.results:
        assert r.objective == pytest.approx(r.cls_term + r.reg_term, abs=1e-6)
    path = save_verdict(v, tmp_path)
    back = load_verdict(path)
    np.testing.assert_allclose(back.per_class_scores, v.per_class_scores)
    np.testing.assert_allclose(back.results[1].mask, v.results[1].mask.astype(np.float32))
    strict = v.rethreshold(1e9)
    assert not strict.is_backdoored and strict.threshold == 1e9


def test_detect_abs_verdict_contract(tiny_model):
    model, data = tiny_model
    cfg = DetectConfig(abs=AbsConfig(steps=20, batch_size=32, top_k_neurons=3), classes=(0, 1))
    v = detect(model, "abs", data, cfg)
    assert v.method == "abs"
    assert v.score_for_ap == pytest.approx(max(v.per_class_scores))
    assert v.rethreshold(0.0).flagged_classes == [0, 1]


def test_detect_config_roundtrip():
    cfg = DetectConfig(nc=FAST_NC, mad_threshold=2.5, classes=(1, 2))
    assert DetectConfig.from_dict(cfg.to_dict()) == cfg


def test_verdict_flag_property():
    v = DetectionVerdict("nc", np.ones(3), np.zeros(3), [], 0.0)
    assert not v.is_backdoored
