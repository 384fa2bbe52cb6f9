"""Compensatory bound: how much target-class confidence a poisoned model must give up.

A reversal defense compares each class's optimum ``cls + reg``. A backdoor makes
the poisoned class cheaper (smaller ``reg``). Keeping its objective at or above a
benign model's requires the poisoned classification loss to cover the gap::

    cls_poi >= reg_ben - reg_poi + cls_ben (+ epsilon)

The resulting CE floor is turned into the largest admissible attack rate by
:func:`lsplab.lsp.max_attack_rate`.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lsp import deployment_attack_rate, max_attack_rate


@dataclass(frozen=True)
class CompensatoryInputs:
    reg_benign: float
    reg_poisoned: float
    cls_benign: float = 0.0
    epsilon: float = 0.0
    lambda_weight: float | None = None
    norm_benign: float | None = None
    norm_poisoned: float | None = None
    num_classes: int = 10

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        for name in ("norm_benign", "norm_poisoned"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass(frozen=True)
class CompensatoryBound:
    ce_lower_bound: float
    max_attack_rate: float
    feasible: bool
    provenance: dict = field(default_factory=dict)
    inputs: CompensatoryInputs | None = None

    def deployment_rate(self, safety_factor: float = 0.9) -> float:
        if not self.feasible:
            raise ValueError("no feasible attack rate for this bound")
        return deployment_attack_rate(self.max_attack_rate, safety_factor)

    def to_dict(self) -> dict:
        ar = self.max_attack_rate
        return {"ce_lower_bound": self.ce_lower_bound,
                "max_attack_rate": "inf" if ar == math.inf else ar,
                "feasible": self.feasible,
                "provenance": self.provenance,
                "inputs": asdict(self.inputs) if self.inputs is not None else None}

    @classmethod
    def from_dict(cls, doc: dict) -> "CompensatoryBound":
        inputs = CompensatoryInputs(**doc["inputs"]) if doc.get("inputs") else None
        return cls(float(doc["ce_lower_bound"]), float(doc["max_attack_rate"]), bool(doc["feasible"]),
                   dict(doc.get("provenance") or {}), inputs)


def general_bound(inputs: CompensatoryInputs) -> float:
    return max(0.0, inputs.reg_benign - inputs.reg_poisoned + inputs.cls_benign + inputs.epsilon)


def nc_bound(lambda_weight: float, norm_benign: float, norm_poisoned: float, epsilon: float = 0.0) -> float:
    """NC instance of the bound, with the benign classification loss dropped."""
    if lambda_weight < 0:
        raise ValueError("lambda_weight must be >= 0")
    return max(0.0, lambda_weight * (norm_benign - norm_poisoned) + epsilon)


def bound_from_ce(ce_bound: float, num_classes: int, provenance=None, inputs=None) -> CompensatoryBound:
    # a zero floor means the attack needs no compensation at all
    ar = math.inf if ce_bound <= 0 else max_attack_rate(ce_bound, num_classes)
    return CompensatoryBound(float(ce_bound), float(ar), ar > 1.0, dict(provenance or {}), inputs)


def _as_list(runs):
    if isinstance(runs, (list, tuple)):
        if not runs:
            raise ValueError("need at least one defense run")
        return list(runs)
    return [runs]


def _comparable_config(result) -> dict:
    cfg = dict(result.details.get("config") or {})
    cfg.pop("seed", None)
    return cfg


def plan_attack(benign_runs, poisoned_runs, epsilon: float = 0.0, num_classes: int | None = None,
                provenance: dict | None = None) -> CompensatoryBound:
    """Bound from paired defense runs on a benign and a pilot-poisoned model.

    Each side may be one ``ReversalResult`` or a list of replicas, which are averaged.
    """
    ben, poi = _as_list(benign_runs), _as_list(poisoned_runs)
    everything = ben + poi
    methods = {r.method for r in everything}
    classes = {r.target_class for r in everything}
    if len(methods) != 1:
        raise ValueError(f"defense runs mix methods {sorted(methods)}")
    if len(classes) != 1:
        raise ValueError(f"defense runs target different classes {sorted(classes)}")
    ref = _comparable_config(everything[0])
    for r in everything[1:]:
        if _comparable_config(r) != ref:
            raise ValueError("defense runs were produced with different configs")
    if num_classes is None:
        raise ValueError("num_classes is required")

    method = methods.pop()
    lam = ref.get("lambda_weight") if method == "nc" else None
    inputs = CompensatoryInputs(
        reg_benign=float(np.mean([r.reg_term for r in ben])),
        reg_poisoned=float(np.mean([r.reg_term for r in poi])),
        cls_benign=float(np.mean([r.cls_term for r in ben])),
        epsilon=float(epsilon),
        lambda_weight=lam,
        norm_benign=float(np.mean([r.l1_norm for r in ben])),
        norm_poisoned=float(np.mean([r.l1_norm for r in poi])),
        num_classes=int(num_classes))
    prov = {"method": method, "target_class": classes.pop(), "n_benign_runs": len(ben),
            "n_poisoned_runs": len(poi), "config": ref}
    prov.update(provenance or {})
    return bound_from_ce(general_bound(inputs), num_classes, prov, inputs)


def save_bound_report(bound: CompensatoryBound, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(bound.to_dict(), indent=2))
    os.replace(tmp, path)
    return path


def load_bound_report(path) -> CompensatoryBound:
    return CompensatoryBound.from_dict(json.loads(Path(path).read_text()))


def plan_from_reports(benign_reports: Sequence, poisoned_reports: Sequence, target_class: int,
                      epsilon: float = 0.0, num_classes: int | None = None) -> CompensatoryBound:
    """:func:`plan_attack` over saved defense reports (paths written by ``save_verdict``)."""
    from .defense import load_verdict

    def pick(paths):
        out = []
        for p in paths:
            v = load_verdict(p)
            hits = [r for r in v.results if r.target_class == target_class]
            if not hits:
                raise ValueError(f"{p} has no run for class {target_class}")
            out.append(hits[0])
        return out

    ben, poi = pick(benign_reports), pick(poisoned_reports)
    k = num_classes if num_classes is not None else len(load_verdict(benign_reports[0]).per_class_scores)
    return plan_attack(ben, poi, epsilon, k, {"benign_reports": [str(p) for p in benign_reports],
                                              "poisoned_reports": [str(p) for p in poisoned_reports]})
