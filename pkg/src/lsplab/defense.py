"""Trigger reverse engineering defenses.

Both defenses minimize ``objective = cls_term + reg_term`` over a mask ``m`` and
pattern ``p`` stamped as ``(1 - m) * x + m * p``. Mask and pattern are sigmoids
of unconstrained variables, so the box constraints hold without projection.

* Neural-Cleanse style: ``cls = mean CE(target)``, ``reg = lambda * |m|_1``; a
  class whose reversed mask is anomalously small (MAD test) is flagged.
* ABS style: ``w1 * margin + w2 * neuron term + w3 * (hinge(|m|_1 - size) + SSIM term)``,
  driven by a candidate neuron from an elevation scan.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifier import Classifier, log_softmax, softmax
from .core import LabeledDataset, check_seed, make_rng
from .ssim import ssim_batch
from .triggers import apply_patch

log = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826


class OptimizationError(RuntimeError):
    pass


class Method(str, enum.Enum):
    NC = "nc"
    ABS = "abs"


@dataclass(frozen=True)
class ReversalConfig:
    lambda_weight: float = 1e-3
    steps: int = 300
    step_size: float = 0.1
    restarts: int = 1
    lambda_schedule: str = "fixed"
    optimizer: str = "adam"
    batch_size: int = 64
    seed: int = 0
    init_mask: float = 0.05
    # adaptive schedule only
    lambda_patience: int = 10
    lambda_factor: float = 1.5
    asr_goal: float = 0.99

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.lambda_schedule not in ("fixed", "adaptive"):
            raise ValueError(f"unknown lambda_schedule {self.lambda_schedule!r}")
        if self.optimizer not in ("adam", "monotone"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 < self.init_mask < 1.0:
            raise ValueError("init_mask must be in (0, 1)")
        check_seed(self.seed)


@dataclass(frozen=True)
class AbsConfig:
    w1: float = 1.0
    w2: float = 0.1
    w3: float = 1.0
    size_budget: float | None = None  # default: 6% of the image area
    layer_index: int = -2
    top_k_neurons: int = 5
    steps: int = 300
    step_size: float = 0.1
    batch_size: int = 64
    elevation_factor: float = 3.0
    literal_ssim: bool = False  # use +SSIM instead of (1 - SSIM)
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("ABS weights must be >= 0")
        if self.size_budget is not None and not self.size_budget > 0:
            raise ValueError("size_budget must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.optimizer not in ("adam", "monotone"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ReversalResult:
    target_class: int
    mask: np.ndarray
    pattern: np.ndarray
    l1_norm: float
    cls_term: float
    reg_term: float
    objective: float
    attack_success_of_reversed: float
    method: str = "nc"
    details: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"target_class": self.target_class, "method": self.method, "l1_norm": self.l1_norm,
                "cls_term": self.cls_term, "reg_term": self.reg_term, "objective": self.objective,
                "attack_success_of_reversed": self.attack_success_of_reversed, **self.details}


@dataclass
class DetectionVerdict:
    method: str
    per_class_scores: np.ndarray
    anomaly_indices: np.ndarray
    flagged_classes: list
    score_for_ap: float
    results: list = field(default_factory=list, repr=False)
    threshold: float = 0.0

    @property
    def is_backdoored(self) -> bool:
        return len(self.flagged_classes) > 0

    def rethreshold(self, threshold: float) -> "DetectionVerdict":
        """Same scores, new decision threshold."""
        if self.method == Method.NC.value:
            scores = np.asarray(self.per_class_scores)
            below = scores < np.median(scores)
            flagged = [int(c) for c in np.flatnonzero(below & (np.asarray(self.anomaly_indices) > threshold))]
        else:
            flagged = [int(c) for c in np.flatnonzero(np.asarray(self.per_class_scores) >= threshold)]
        return replace(self, flagged_classes=flagged, threshold=threshold)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _split_batch(benign_batch, batch_size):
    """(reversal images, holdout images, holdout labels or None)."""
    if isinstance(benign_batch, LabeledDataset):
        images, labels = np.asarray(benign_batch.images, dtype=np.float64), benign_batch.hard_labels
    else:
        images, labels = np.asarray(benign_batch, dtype=np.float64), None
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise ValueError("benign batch is empty")
    x = images[:batch_size]
    if images.shape[0] > batch_size:
        hold, hold_labels = images[batch_size:], None if labels is None else labels[batch_size:]
    else:
        hold, hold_labels = x, None if labels is None else labels[:batch_size]
    return x, hold, hold_labels


def reversed_attack_success(model, images, mask, pattern, target_class, labels=None) -> float:
    """Fraction of images classified as ``target_class`` after stamping (mask, pattern)."""
    if labels is not None:
        keep = np.asarray(labels) != target_class
        if keep.any():
            images = images[keep]
    stamped = apply_patch(images, mask, pattern)
    return float(np.mean(model.predict(stamped).argmax(axis=1) == target_class))


class _Adam:
    def __init__(self, lr):
        self.lr, self.t, self.m, self.v = lr, 0, None, None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            out.append(p - self.lr * (m / (1 - 0.9 ** self.t)) / (np.sqrt(v / (1 - 0.999 ** self.t)) + 1e-8))
        return out


def _minimize(objective_and_grad, init, steps, step_size, optimizer, on_step=None):
    """Minimize over raw variables; returns (best_params, best_value, history, steps_run).

    ``monotone`` is backtracking gradient descent that only accepts non-increasing steps.
    """
    params = [np.array(p) for p in init]
    value, grads, _ = objective_and_grad(params)
    if not math.isfinite(value):
        raise OptimizationError("non-finite objective at step 0")
    best, best_value = params, value
    history = [value]
    adam = _Adam(step_size)
    lr = step_size
    for step in range(1, steps + 1):
        if optimizer == "adam":
            params = adam.step(params, grads)
            value, grads, aux = objective_and_grad(params)
            if not math.isfinite(value):
                raise OptimizationError(f"non-finite objective at step {step}")
        else:
            gnorm2 = sum(float(np.sum(g * g)) for g in grads)
            if gnorm2 == 0.0:
                break
            for _ in range(30):
                trial = [p - lr * g for p, g in zip(params, grads)]
                tvalue, tgrads, aux = objective_and_grad(trial)
                if math.isfinite(tvalue) and tvalue <= value:
                    break
                lr *= 0.5
            else:
                break
            params, value, grads = trial, tvalue, tgrads
            lr = min(lr * 1.5, 1e3 * step_size)
        history.append(value)
        if value < best_value:
            best, best_value = params, value
        if on_step is not None:
            on_step(step, aux)
    return best, best_value, history, len(history) - 1


# ---------------------------------------------------------------------------
# Neural-Cleanse style reversal

def _nc_objective(model, x, onehot, lam_ref):
    n = x.shape[0]

    def f(params):
        a, b = params
        m, p = _sigmoid(a), _sigmoid(b)
        xb = (1.0 - m[..., None]) * x + m[..., None] * p
        cache = []
        logits = model.forward(xb, cache)
        lsm = log_softmax(logits)
        ce = float(-np.mean(np.sum(onehot * lsm, axis=1)))
        lam = lam_ref[0]
        reg = lam * float(m.sum())
        dlogits = (softmax(logits) - onehot) / n
        dxb, _ = model.backward(cache, {-1: dlogits}, need_params=False, need_input=True)
        dm = np.sum(dxb * (p - x), axis=(0, 3)) + lam
        dp = np.sum(dxb, axis=0) * m[..., None]
        sm, sp = m * (1 - m), p * (1 - p)
        asr = float(np.mean(logits.argmax(axis=1) == int(np.argmax(onehot[0]))))
        return ce + reg, [dm * sm, dp * sp], (ce, reg, asr)

    return f


def _adaptive_lambda(config: ReversalConfig, lam_ref):
    """Raise lambda after a streak of successful steps, lower it after a streak of failures."""
    state = {"up": 0, "down": 0}

    def on_step(step, aux):
        if aux[2] >= config.asr_goal:
            state["up"], state["down"] = state["up"] + 1, 0
        else:
            state["up"], state["down"] = 0, state["down"] + 1
        if state["up"] >= config.lambda_patience:
            lam_ref[0] = max(lam_ref[0], 1e-6) * config.lambda_factor
            state["up"] = 0
        elif state["down"] >= config.lambda_patience:
            lam_ref[0] = lam_ref[0] / config.lambda_factor ** 1.5
            state["down"] = 0

    return on_step


def reverse_trigger_nc(model: Classifier, target_class: int, benign_batch, config: ReversalConfig = ReversalConfig()):
    """Reconstruct the smallest mask/pattern that sends the batch to ``target_class``."""
    k = model.num_classes
    if not 0 <= target_class < k:
        raise ValueError(f"target_class {target_class} out of range")
    x, hold, hold_labels = _split_batch(benign_batch, config.batch_size)
    h, w, c = model.input_shape
    onehot = np.zeros((x.shape[0], k))
    onehot[:, target_class] = 1.0
    best = None
    for r in range(config.restarts):
        rng = make_rng(config.seed, 5, target_class, r)
        a0 = math.log(config.init_mask / (1.0 - config.init_mask))
        init = [a0 + rng.uniform(-0.5, 0.5, size=(h, w)), rng.uniform(-2.0, 2.0, size=(h, w, c))]
        lam_ref = [config.lambda_weight]
        f = _nc_objective(model, x, onehot, lam_ref)
        on_step = _adaptive_lambda(config, lam_ref) if config.lambda_schedule == "adaptive" else None
        params, _, history, steps_run = _minimize(f, init, config.steps, config.step_size, config.optimizer, on_step)
        # re-evaluate the returned point at the final weight so the breakdown is self-consistent
        objective, _, (ce, reg, _) = f(params)
        if best is None or objective < best[0]:
            best = (objective, params, ce, reg, lam_ref[0], history, steps_run, r)
    objective, (a, b), ce, reg, lam, history, steps_run, restart = best
    mask, pattern = _sigmoid(a), _sigmoid(b)
    asr = reversed_attack_success(model, hold, mask, pattern, target_class, hold_labels)
    return ReversalResult(target_class, mask, pattern, float(mask.sum()), ce, reg, ce + reg, asr, "nc",
                          {"lambda_weight": lam, "config": asdict(config), "steps_run": steps_run, "restart": restart,
                           "initial_objective": history[0], "final_objective": history[-1]})


# ---------------------------------------------------------------------------
# MAD outlier test

def mad_anomaly(per_class_norms, threshold: float = 2.0):
    """Anomaly index ``|x - median| / (1.4826 * MAD)`` per class.

    A class is flagged when its norm is below the median and its index exceeds
    ``threshold``. With zero MAD every index is 0 and nothing is flagged.
    """
    x = np.asarray(per_class_norms, dtype=np.float64)
    if x.ndim != 1 or x.size < 3:
        raise ValueError("mad_anomaly needs a vector of at least 3 norms")
    med = np.median(x)
    mad = MAD_CONSISTENCY * np.median(np.abs(x - med))
    if mad == 0:
        return np.zeros_like(x), []
    idx = np.abs(x - med) / mad
    flagged = [int(i) for i in np.flatnonzero((x < med) & (idx > threshold))]
    return idx, flagged


# ---------------------------------------------------------------------------
# ABS style: neuron elevation scan and reversal

def _neuron_values(model, layer_index, acts):
    """Activation per neuron: units for dense taps, channel means for conv taps."""
    a = acts[layer_index]
    return a.reshape(a.shape[0], -1, a.shape[-1]).mean(axis=1) if a.ndim == 4 else a


def neuron_elevation_table(model: Classifier, benign_batch, layer_index: int, factor: float = 3.0):
    """Mean logit change per (neuron, class) when that neuron is raised to ``factor * max``.

    Returns (table[neuron, class], score[neuron]) where score is the mean increase
    of the largest non-true-class logit.
    """
    x = benign_batch.images if isinstance(benign_batch, LabeledDataset) else benign_batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    logits, acts = model.forward_taps(x)
    model._tap(layer_index)
    a = acts[layer_index]
    width = a.shape[-1]
    true = logits.argmax(axis=1)
    other = logits.copy()
    other[np.arange(len(true)), true] = -np.inf
    base_other = other.max(axis=1)
    peak = a.max() if a.size else 0.0
    table = np.zeros((width, model.num_classes))
    score = np.zeros(width)
    for nrn in range(width):
        mod = a.copy()
        mod[..., nrn] = factor * peak
        out = model.forward_from(layer_index, mod)
        table[nrn] = np.mean(out - logits, axis=0)
        o = out.copy()
        o[np.arange(len(true)), true] = -np.inf
        score[nrn] = float(np.mean(o.max(axis=1) - base_other))
    return table, score


def scan_compromised_neurons(model: Classifier, benign_batch, layer_index: int, top_k: int, factor: float = 3.0):
    """Top-k neurons of a layer by elevation score, sorted descending."""
    _, score = neuron_elevation_table(model, benign_batch, layer_index, factor)
    order = np.argsort(-score, kind="stable")[:max(0, int(top_k))]
    return [(int(n), float(score[n])) for n in order]


def _abs_objective(model, x, target, layer_index, neuron, cfg: AbsConfig, size_budget):
    n = x.shape[0]
    k = model.num_classes
    sign = np.ones(k)
    sign[target] = -1.0

    def f(params):
        a, b = params
        m, p = _sigmoid(a), _sigmoid(b)
        xb = (1.0 - m[..., None]) * x + m[..., None] * p
        cache = []
        logits = model.forward(xb, cache)
        l_logits = float(np.mean(logits @ sign))
        grads = {-1: np.broadcast_to(cfg.w1 * sign / n, logits.shape)}
        # neuron term: -a_n + sum_{i != n} a_i, read off the cached tap input of the next op
        tap_op = model._tap(layer_index)
        act = np.maximum(cache[tap_op], 0.0) if model.arch[tap_op]["type"] == "relu" else logits
        if act.ndim == 4:
            per = act.reshape(n, -1, act.shape[-1]).mean(axis=1)
            nsign = np.ones(act.shape[-1])
            nsign[neuron] = -1.0
            l_inter = float(np.mean(per @ nsign))
            g_act = np.broadcast_to(cfg.w2 * nsign / (n * act.shape[1] * act.shape[2]), act.shape)
        else:
            nsign = np.ones(act.shape[-1])
            nsign[neuron] = -1.0
            l_inter = float(np.mean(act @ nsign))
            g_act = np.broadcast_to(cfg.w2 * nsign / n, act.shape)
        if cfg.w2:
            grads[layer_index] = g_act
        norm = float(m.sum())
        hinge = max(norm - size_budget, 0.0)
        s, ds = ssim_batch(x, xb, with_grad=True)
        if cfg.literal_ssim:
            sim_term, dsim = float(np.mean(s)), ds / n
        else:
            sim_term, dsim = float(np.mean(1.0 - s)), -ds / n
        l_mask = hinge + sim_term
        dxb, _ = model.backward(cache, grads, need_params=False, need_input=True)
        dxb = dxb + cfg.w3 * dsim
        dm = np.sum(dxb * (p - x), axis=(0, 3)) + cfg.w3 * (1.0 if hinge > 0 else 0.0)
        dp = np.sum(dxb, axis=0) * m[..., None]
        cls = cfg.w1 * l_logits
        reg = cfg.w2 * l_inter + cfg.w3 * l_mask
        aux = (cls, reg, l_logits, l_inter, l_mask)
        return cls + reg, [dm * m * (1 - m), dp * p * (1 - p)], aux

    return f


def reverse_trigger_abs(model: Classifier, target_class: int, benign_batch, neuron, config: AbsConfig = AbsConfig()):
    """ABS-style reversal for one candidate neuron; ``neuron`` is an index or (layer, index)."""
    if isinstance(neuron, tuple):
        layer_index, neuron = neuron
    else:
        layer_index = config.layer_index
    if not 0 <= target_class < model.num_classes:
        raise ValueError(f"target_class {target_class} out of range")
    x, hold, hold_labels = _split_batch(benign_batch, config.batch_size)
    h, w, c = model.input_shape
    size_budget = config.size_budget if config.size_budget is not None else 0.06 * h * w
    rng = make_rng(config.seed, 6, target_class, int(neuron))
    init = [rng.uniform(-4.0, -2.0, size=(h, w)), rng.uniform(-2.0, 2.0, size=(h, w, c))]
    f = _abs_objective(model, x, target_class, layer_index, int(neuron), config, size_budget)
    params, _, history, steps_run = _minimize(f, init, config.steps, config.step_size, config.optimizer)
    objective, _, (cls, reg, l_logits, l_inter, l_mask) = f(params)
    mask, pattern = _sigmoid(params[0]), _sigmoid(params[1])
    asr = reversed_attack_success(model, hold, mask, pattern, target_class, hold_labels)
    return ReversalResult(target_class, mask, pattern, float(mask.sum()), cls, reg, cls + reg, asr, "abs",
                          {"neuron": [int(layer_index) % len(model.taps), int(neuron)], "l_logits": l_logits,
                           "l_inter": l_inter, "l_mask": l_mask, "size_budget": size_budget, "config": asdict(config),
                           "steps_run": steps_run})


# ---------------------------------------------------------------------------
# Model-level decision

@dataclass(frozen=True)
class DetectConfig:
    nc: ReversalConfig = ReversalConfig()
    abs: AbsConfig = AbsConfig()
    mad_threshold: float = 2.0
    abs_threshold: float = 0.85
    classes: tuple | None = None  # restrict reversal to these classes (ABS/diagnostics)

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectConfig":
        doc = dict(doc or {})
        nc = ReversalConfig(**doc.pop("nc", {}))
        abs_cfg = AbsConfig(**doc.pop("abs", {}))
        classes = doc.pop("classes", None)
        return cls(nc=nc, abs=abs_cfg, classes=tuple(classes) if classes is not None else None, **doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes) if self.classes is not None else None
        return d


def detect(model: Classifier, method, benign_data, config: DetectConfig = DetectConfig()) -> DetectionVerdict:
    """Reverse every class and decide whether the model carries a backdoor."""
    method = Method(method)
    classes = list(range(model.num_classes)) if config.classes is None else list(config.classes)
    results = []
    if method is Method.NC:
        for c in classes:
            results.append(reverse_trigger_nc(model, c, benign_data, config.nc))
        norms = np.array([r.l1_norm for r in results])
        idx, flagged = mad_anomaly(norms, config.mad_threshold)
        flagged = [classes[i] for i in flagged]
        below = norms < np.median(norms)
        score = float(np.max(idx[below])) if below.any() else 0.0
        return DetectionVerdict(method.value, norms, idx, flagged, score, results, config.mad_threshold)

    cfg = config.abs
    x, _, _ = _split_batch(benign_data, cfg.batch_size)
    table, score = neuron_elevation_table(model, x, cfg.layer_index, cfg.elevation_factor)
    top = np.argsort(-score, kind="stable")[:cfg.top_k_neurons]
    for c in classes:
        nrn = int(top[np.argmax(table[top, c])])
        results.append(reverse_trigger_abs(model, c, benign_data, (cfg.layer_index, nrn), cfg))
    scores = np.array([r.attack_success_of_reversed for r in results])
    flagged = [classes[i] for i in np.flatnonzero(scores >= config.abs_threshold)]
    return DetectionVerdict(method.value, scores, np.zeros_like(scores), flagged, float(scores.max()),
                            results, config.abs_threshold)


# ---------------------------------------------------------------------------
# Reports

def verdict_to_dict(verdict: DetectionVerdict) -> dict:
    return {"method": verdict.method,
            "per_class_scores": [float(v) for v in verdict.per_class_scores],
            "anomaly_indices": [float(v) for v in verdict.anomaly_indices],
            "flagged_classes": list(verdict.flagged_classes),
            "is_backdoored": verdict.is_backdoored,
            "score_for_ap": float(verdict.score_for_ap),
            "threshold": float(verdict.threshold),
            "results": [r.summary() for r in verdict.results]}


def save_verdict(verdict: DetectionVerdict, directory) -> Path:
    """JSON report plus each reversed mask/pattern as raw little-endian float32."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = verdict_to_dict(verdict)
    for entry, r in zip(doc["results"], verdict.results):
        stem = f"{verdict.method}_class{r.target_class}"
        r.mask.astype("<f4").tofile(directory / f"{stem}_mask.f32")
        r.pattern.astype("<f4").tofile(directory / f"{stem}_pattern.f32")
        entry["mask_file"] = f"{stem}_mask.f32"
        entry["pattern_file"] = f"{stem}_pattern.f32"
        entry["mask_shape"] = list(r.mask.shape)
        entry["pattern_shape"] = list(r.pattern.shape)
    tmp = directory / f"{verdict.method}_report.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2))
    os.replace(tmp, directory / f"{verdict.method}_report.json")
    return directory / f"{verdict.method}_report.json"


def load_verdict(path) -> DetectionVerdict:
    path = Path(path)
    doc = json.loads(path.read_text())
    results = []
    for e in doc["results"]:
        mask = np.fromfile(path.parent / e["mask_file"], dtype="<f4").astype(np.float64).reshape(e["mask_shape"])
        pattern = np.fromfile(path.parent / e["pattern_file"], dtype="<f4").astype(np.float64).reshape(
            e["pattern_shape"])
        details = {k: v for k, v in e.items() if k not in {
            "target_class", "method", "l1_norm", "cls_term", "reg_term", "objective",
            "attack_success_of_reversed", "mask_file", "pattern_file", "mask_shape", "pattern_shape"}}
        results.append(ReversalResult(e["target_class"], mask, pattern, e["l1_norm"], e["cls_term"], e["reg_term"],
                                      e["objective"], e["attack_success_of_reversed"], e["method"], details))
    return DetectionVerdict(doc["method"], np.array(doc["per_class_scores"]), np.array(doc["anomaly_indices"]),
                            list(doc["flagged_classes"]), doc["score_for_ap"], results, doc.get("threshold", 0.0))
