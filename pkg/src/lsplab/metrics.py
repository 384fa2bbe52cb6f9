"""Attack-side (BA, ASR, ReASR) and defense-side (ACC, AP) evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import LabeledDataset
from .triggers import TriggerSpec, apply_patch, apply_trigger


@dataclass
class MetricsReport:
    benign_accuracy: float | None = None
    attack_success_rate: float | None = None
    reattack_success_rate: float | None = None
    detection_accuracy: float | None = None
    average_precision: float | None = None

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def benign_accuracy(model, test_set: LabeledDataset) -> float:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    pred = model.predict(test_set.images).argmax(axis=1)
    return float(np.mean(pred == test_set.hard_labels))


def _non_target(test_set: LabeledDataset, target_class: int) -> np.ndarray:
    keep = test_set.hard_labels != target_class
    if not keep.any():
        raise ValueError(f"no test samples outside target class {target_class}")
    return np.asarray(test_set.images[keep], dtype=np.float64)


def attack_success_rate(model, test_set: LabeledDataset, trigger: TriggerSpec, target_class: int,
                        rng=None) -> float:
    """Share of triggered non-target samples predicted as ``target_class``."""
    images = apply_trigger(trigger, _non_target(test_set, target_class), rng=rng)
    return float(np.mean(model.predict(images).argmax(axis=1) == target_class))


def reattack_success_rate(model, test_set: LabeledDataset, gt_mask, reversed_mask, reversed_pattern,
                          target_class: int) -> float:
    """ASR of the reversed trigger restricted to the true trigger's support.

    Stamps mask ``gt_mask * reversed_mask`` with pattern ``reversed_pattern``.
    """
    if gt_mask is None:
        raise ValueError("reattack success rate needs the ground-truth mask")
    composite = np.asarray(gt_mask, dtype=np.float64) * np.asarray(reversed_mask, dtype=np.float64)
    images = apply_patch(_non_target(test_set, target_class), composite, reversed_pattern)
    return float(np.mean(model.predict(images).argmax(axis=1) == target_class))


def average_precision(scores, truths) -> float:
    """Step-interpolated area under the precision-recall curve.

    Thresholds sweep the distinct scores in descending order; tied scores enter together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    n_pos = int(truths.sum())
    if n_pos == 0 or n_pos == truths.size:
        raise ValueError("average precision needs both positive and negative examples")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truths[order]
    tp = np.cumsum(t)
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    precision = tp[ends] / (ends + 1)
    recall = tp[ends] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def detection_metrics(verdicts) -> tuple[float, float]:
    """(ACC, AP) over ``[(verdict, is_really_backdoored), ...]``."""
    verdicts = list(verdicts)
    truths = np.array([bool(t) for _, t in verdicts])
    if truths.all() or not truths.any():
        raise ValueError("detection metrics need both benign and backdoored models (AP undefined)")
    calls = np.array([v.is_backdoored for v, _ in verdicts])
    acc = float(np.mean(calls == truths))
    ap = average_precision([v.score_for_ap for v, _ in verdicts], truths)
    return acc, ap
