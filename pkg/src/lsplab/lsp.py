"""Constrained label smoothing and the attack-rate / confidence / cross-entropy calculus.

The poisoned label puts logit ``ar`` on the target class and logit 1 on every
other class, then applies softmax. ``ar = 1`` gives the uniform label,
``ar -> inf`` the one-hot label of a plain backdoor.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import LabeledDataset, SplitTag, make_rng
from .triggers import TriggerSpec, apply_trigger, trigger_from_dict, trigger_to_dict

log = logging.getLogger(__name__)


def _check_k(num_classes):
    if int(num_classes) < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return int(num_classes)


def _other_weight(attack_rate: float, k: int) -> float:
    # (K-1) * exp(1 - ar): total unnormalized mass off target, with target mass 1
    return (k - 1) * math.exp(1.0 - attack_rate) if attack_rate != math.inf else 0.0


def smooth_label(attack_rate: float, num_classes: int, target_class: int) -> np.ndarray:
    """Soft label ``softmax(logits)`` with ``logits[target] = ar`` and 1 elsewhere."""
    k = _check_k(num_classes)
    if not 0 <= target_class < k:
        raise ValueError(f"target_class {target_class} out of range for K={k}")
    attack_rate = float(attack_rate)
    if math.isnan(attack_rate):
        raise ValueError("attack_rate is NaN")
    if attack_rate == math.inf:
        probs = np.zeros(k)
        probs[target_class] = 1.0
        return probs
    # shift by max(ar, 1) so exp never overflows
    top = max(attack_rate, 1.0)
    t = math.exp(attack_rate - top)
    o = math.exp(1.0 - top)
    z = t + (k - 1) * o
    probs = np.full(k, o / z)
    probs[target_class] = t / z
    return probs


def target_confidence(attack_rate: float, num_classes: int) -> float:
    return float(smooth_label(attack_rate, num_classes, 0)[0])


def ce_at_attack_rate(attack_rate: float, num_classes: int) -> float:
    """Cross-entropy ``-ln p_target`` of a model that fits the smoothed label exactly."""
    k = _check_k(num_classes)
    attack_rate = float(attack_rate)
    if attack_rate == math.inf:
        return 0.0
    if attack_rate >= 1.0:
        return math.log1p(_other_weight(attack_rate, k))
    # ar < 1: -ln(e^ar / (e^ar + (K-1)e)) = ln(1 + (K-1) e^{1-ar}) computed as (1-ar) + ln(e^{ar-1} + K-1)
    return (1.0 - attack_rate) + math.log(math.exp(attack_rate - 1.0) + (k - 1))


def max_attack_rate(ce_lower_bound: float, num_classes: int) -> float:
    """Largest attack rate whose fitted cross-entropy still meets ``ce_lower_bound``.

    Closed form: ``1 + ln((K-1) c / (1 - c))`` with ``c = exp(-bound)``. A result
    ``<= 1`` means no attack rate both keeps the target class on top and meets
    the bound; the caller decides what to do with that.
    """
    k = _check_k(num_classes)
    b = float(ce_lower_bound)
    if not b > 0:
        raise ValueError(f"ce_lower_bound must be > 0, got {b}")
    # ln(c / (1 - c)) = -b - ln(1 - e^{-b})
    ar = 1.0 + math.log(k - 1) - b - math.log(-math.expm1(-b))
    if ar <= 1.0:
        log.warning("CE bound %.4f >= ln(%d): no feasible attack rate (ar*=%.4f)", b, k, ar)
    return ar


def attack_rate_by_bisection(ce_lower_bound: float, num_classes: int, lo=-50.0, hi=80.0, iters=200) -> float:
    """Numerical inverse of :func:`ce_at_attack_rate`, independent of the closed form."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ce_at_attack_rate(mid, num_classes) > ce_lower_bound:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def deployment_attack_rate(max_rate: float, safety_factor: float = 0.9) -> float:
    """Pull a boundary attack rate back toward 1: ``1 + f * (ar* - 1)``."""
    return 1.0 + safety_factor * (max_rate - 1.0)


@dataclass(frozen=True)
class PoisonConfig:
    target_class: int
    attack_rate: float
    poison_fraction: float
    trigger: TriggerSpec
    clean_label: bool = False

    def __post_init__(self):
        if not 0.0 <= self.poison_fraction < 1.0:
            raise ValueError(f"poison_fraction must be in [0, 1), got {self.poison_fraction}")
        if self.target_class < 0:
            raise ValueError("target_class must be >= 0")
        if math.isnan(self.attack_rate):
            raise ValueError("attack_rate is NaN")
        if self.attack_rate <= 1.0:
            log.warning("attack_rate %.3f <= 1: the target class will not win the poisoned label",
                        self.attack_rate)

    def to_dict(self) -> dict:
        ar = self.attack_rate
        return {"target_class": self.target_class,
                "attack_rate": "inf" if ar == math.inf else ar,
                "poison_fraction": self.poison_fraction,
                "clean_label": self.clean_label,
                "trigger": trigger_to_dict(self.trigger)}

    @classmethod
    def from_dict(cls, doc: dict) -> "PoisonConfig":
        return cls(int(doc["target_class"]), float(doc["attack_rate"]), float(doc["poison_fraction"]),
                   trigger_from_dict(doc["trigger"]), bool(doc.get("clean_label", False)))


def poison_dataset(poison_source: LabeledDataset, config: PoisonConfig, seed) -> LabeledDataset:
    """Stamp the trigger on every sample and relabel it with the smoothed target label.

    In clean-label mode only samples already of the target class are kept.
    """
    k = poison_source.num_classes
    if config.target_class >= k:
        raise ValueError(f"target_class {config.target_class} out of range for K={k}")
    source = poison_source
    if config.clean_label:
        source = poison_source.subset(np.flatnonzero(poison_source.hard_labels == config.target_class))
        if len(source) == 0:
            raise ValueError(f"clean-label poisoning found no samples of class {config.target_class}")
    rng = make_rng(seed, 2)
    images = apply_trigger(config.trigger, source.images, rng=rng)
    label = smooth_label(config.attack_rate, k, config.target_class)
    labels = np.broadcast_to(label, (len(source), k))
    return LabeledDataset(images, labels, k, SplitTag.POISON_SOURCE, poison_source.seed, source.origin)
