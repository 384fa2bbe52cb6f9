"""Experiment orchestration.

Stages run in order and are content addressed: each stage key hashes its own
config slice together with the keys of the stages it reads from, so editing a
config field reruns exactly the stages downstream of it. Individual models and
defense reports carry their own keys, which makes a crashed stage resumable.

Layout under ``out_dir``::

    manifest.json            stage keys and status
    config.json
    data/{train,test,defense}/
    zoo/<model_id>/          checkpoints (+ trigger.json for backdoored models)
    zoo.json                 ZooEntry list
    pilot/                   pilot defense reports
    plan.json                compensatory bound(s) and chosen attack rates
    defense/<model_id>/      per-model defense reports
    eval/                    models.csv, summary.json
    sweep/                   attack-rate sweep
    report/                  Markdown / CSV tables
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import Classifier, TrainConfig, load_model, load_model_manifest, save_model, train
from .compensatory import plan_attack
from .core import (LabeledDataset, derive_seed, generate_synthetic_dataset, load_dataset, load_idx_dataset,
                   save_dataset, split_for_poisoning)
from .defense import (DetectConfig, Method, ReversalConfig, detect, load_verdict, reverse_trigger_nc,
                      save_verdict)
from .lsp import PoisonConfig, deployment_attack_rate, poison_dataset
from .metrics import attack_success_rate, average_precision, benign_accuracy, reattack_success_rate
from .triggers import (TriggerKind, TriggerSpec, ground_truth_mask, load_trigger, make_badnets_spec, make_blend_spec,
                       make_filter_spec, make_random_square_spec, save_trigger)

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-zoo", "pilot-defense", "plan-ar", "train-lsp", "defend", "evaluate", "report")
GROUPS = ("benign", "baseline", "lsp")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class IncompleteRunError(RuntimeError):
    pass


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, default=_jsonable))
    os.replace(tmp, path)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _num(x):
    """JSON-safe float: inf/nan as strings."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else str(x)


# ---------------------------------------------------------------------------
# Config

def _default_dataset():
    return {"kind": "synthetic", "num_classes": 10, "per_class_train": 800, "per_class_test": 100,
            "per_class_defense": 20, "height": 28, "width": 28, "channels": 1, "noise": 0.2}


def _default_attack():
    return {"kind": "patch", "size": 16, "corner": "bottom_right", "value": 1.0}


def _default_defense():
    return {"methods": ["nc"], "nc": asdict(ReversalConfig(lambda_weight=0.01, steps=600, step_size=0.3)), "abs": {},
            "mad_threshold": 2.0, "abs_threshold": 0.85, "max_benign_fpr": 1.0 / 6.0}


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=_default_dataset)
    attack: dict = field(default_factory=_default_attack)
    poison_fraction: float = 0.1
    clean_label: bool = False
    zoo: dict = field(default_factory=lambda: {"benign": 6, "baseline": 6, "lsp": 6})
    target_classes: list = field(default_factory=lambda: [0])
    train: dict = field(default_factory=lambda: {"epochs": 8, "batch_size": 64, "learning_rate": 1e-3})
    defense: dict = field(default_factory=_default_defense)
    ar_mode: dict = field(default_factory=lambda: {"mode": "from_bound", "safety_factor": 0.9})
    epsilon: float = 0.0
    sweep: dict = field(default_factory=lambda: {"attack_rates": [], "replicas": 2, "nc": None})
    seed: int = 0

    def __post_init__(self):
        self.dataset = {**_default_dataset(), **self.dataset} if self.dataset.get("kind", "synthetic") == "synthetic" \
            else dict(self.dataset)
        self.attack = {**_default_attack(), **self.attack}
        self.defense = {**_default_defense(), **self.defense}
        self.zoo = {g: int(self.zoo.get(g, 0)) for g in GROUPS}
        if min(self.zoo.values()) < 1:
            raise ValueError("zoo sizes must be >= 1")
        k = self.num_classes
        if not self.target_classes or any(not 0 <= int(t) < k for t in self.target_classes):
            raise ValueError(f"target classes must lie in [0, {k})")
        if self.ar_mode.get("mode") not in ("fixed", "from_bound"):
            raise ValueError(f"unknown ar mode {self.ar_mode.get('mode')!r}")
        if self.ar_mode["mode"] == "fixed" and "value" not in self.ar_mode:
            raise ValueError("fixed ar mode needs a value")
        if not 0.0 < self.poison_fraction < 1.0:
            raise ValueError("poison_fraction must be in (0, 1)")
        for m in self.defense["methods"]:
            Method(m)
        # validate the typed views eagerly
        self.train_config(0)
        self.detect_config()

    @property
    def num_classes(self) -> int:
        if self.dataset["kind"] == "synthetic":
            return int(self.dataset["num_classes"])
        if self.dataset.get("num_classes") is None:
            raise ValueError("IDX datasets need dataset.num_classes in the config")
        return int(self.dataset["num_classes"])

    def train_config(self, seed) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def detect_config(self, nc_override: dict | None = None) -> DetectConfig:
        d = self.defense
        nc = ReversalConfig(**(nc_override if nc_override is not None else d["nc"]))
        return DetectConfig.from_dict({"nc": asdict(nc), "abs": d.get("abs") or {},
                                       "mad_threshold": d["mad_threshold"], "abs_threshold": d["abs_threshold"]})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def minimal_config(seed: int = 0) -> ExperimentConfig:
    """Tiny K=4, 8x8 experiment used for smoke runs."""
    return ExperimentConfig(
        dataset={"kind": "synthetic", "num_classes": 4, "per_class_train": 200, "per_class_test": 25,
                 "per_class_defense": 20, "height": 8, "width": 8},
        attack={"kind": "patch", "size": 4},
        zoo={"benign": 2, "baseline": 2, "lsp": 2},
        train={"epochs": 6, "batch_size": 32, "learning_rate": 3e-3},
        defense={"nc": asdict(ReversalConfig(lambda_weight=0.01, steps=100, step_size=0.3, batch_size=32))},
        seed=seed)


def make_trigger(attack: dict, shape) -> TriggerSpec:
    h, w, c = shape
    kind = TriggerKind(attack["kind"])
    if kind is TriggerKind.PATCH:
        return make_badnets_spec(h, w, c, attack["size"], attack.get("corner", "bottom_right"),
                                 attack.get("value", 1.0))
    if kind is TriggerKind.RANDOM_PATCH:
        return make_random_square_spec(h, w, c, attack["size"], attack.get("corner", "bottom_right"),
                                       attack.get("value", 1.0), attack.get("position_jitter", 2),
                                       attack.get("color_jitter", 0.2), attack.get("seed", 0))
    if kind is TriggerKind.BLEND:
        return make_blend_spec(h, w, c, attack.get("alpha", 0.1), attack.get("seed", 0))
    return make_filter_spec(attack["channel_scale"], attack["channel_shift"], h, w)


# ---------------------------------------------------------------------------
# Zoo bookkeeping

@dataclass
class ZooEntry:
    model_id: str
    group: str
    checkpoint: str
    backdoored: bool
    seed: int
    target_class: int | None = None
    trigger: str | None = None
    attack_rate: float | None = None
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backdoored and self.trigger is None:
            raise ValueError(f"{self.model_id}: backdoored entries need a trigger reference")
        if not self.backdoored and self.trigger is not None:
            raise ValueError(f"{self.model_id}: benign entries carry no trigger")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack_rate"] = _num(self.attack_rate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ZooEntry":
        d = dict(d)
        if d.get("attack_rate") is not None:
            d["attack_rate"] = float(d["attack_rate"])
        return cls(**d)


def load_zoo(out_dir) -> list[ZooEntry]:
    path = Path(out_dir) / "zoo.json"
    if not path.exists():
        return []
    return [ZooEntry.from_dict(d) for d in json.loads(path.read_text())]


def _save_zoo(out_dir: Path, entries) -> None:
    _write_json(out_dir / "zoo.json", [e.to_dict() for e in sorted(entries, key=lambda e: e.model_id)])


def _run_jobs(fn, jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


def _train_member(job: dict) -> dict:
    """Worker: train (or reuse) one zoo member. ``job`` is plain JSON-able data."""
    out = Path(job["checkpoint"])
    if (out / "manifest.json").exists():
        try:
            if load_model_manifest(out).get("key") == job["key"]:
                return {"model_id": job["model_id"], "reused": True}
        except (OSError, ValueError):
            pass
    train_set = load_dataset(job["train_dir"])
    tc = TrainConfig(**job["train"])
    model = Classifier(train_set.image_shape, train_set.num_classes, seed=job["seed"])
    meta = {"key": job["key"], "seed": job["seed"], "train": job["train"], "group": job["group"]}
    if job["attack_rate"] is not None:
        trigger = load_trigger(job["trigger"])
        ar = float(job["attack_rate"])
        pc = PoisonConfig(job["target_class"], ar, job["poison_fraction"], trigger, job["clean_label"])
        benign_part, source = split_for_poisoning(train_set, pc.poison_fraction, job["seed"])
        poisoned = poison_dataset(source, pc, job["seed"])
        if pc.clean_label:
            # clean-label keeps non-target poison-source samples unmodified
            rest = source.subset(np.flatnonzero(source.hard_labels != pc.target_class))
            train_set = LabeledDataset.concat([benign_part, rest, poisoned])
        else:
            train_set = LabeledDataset.concat([benign_part, poisoned])
        meta["poison"] = {**pc.to_dict(), "trigger": job["trigger"]}
    model = train(model, train_set, tc)
    save_model(model, out, meta)
    return {"model_id": job["model_id"], "reused": False}


def _defend_member(job: dict) -> str:
    out = Path(job["out"])
    key_file = out / f"{job['method']}_key.json"
    report = out / f"{job['method']}_report.json"
    if key_file.exists() and report.exists() and json.loads(key_file.read_text()).get("key") == job["key"]:
        return str(report)
    model = load_model(job["checkpoint"])
    data = load_dataset(job["defense_dir"])
    cfg = DetectConfig.from_dict(job["detect"])
    verdict = detect(model, job["method"], data, cfg)
    path = save_verdict(verdict, out)
    _write_json(key_file, {"key": job["key"]})
    return str(path)


def _reverse_one(job: dict) -> dict:
    """Worker: NC reversal of a single class, cached by key."""
    out = Path(job["out"])
    if out.exists():
        doc = json.loads(out.read_text())
        if doc.get("key") == job["key"]:
            return doc
    model = load_model(job["checkpoint"])
    data = load_dataset(job["defense_dir"])
    r = reverse_trigger_nc(model, job["target_class"], data, ReversalConfig(**job["nc"]))
    doc = {"key": job["key"], **r.summary(), "mask": r.mask.tolist(), "pattern": r.pattern.tolist()}
    _write_json(out, doc)
    return doc


def _result_from_doc(doc):
    from .defense import ReversalResult
    details = {k: v for k, v in doc.items() if k not in {
        "key", "target_class", "method", "l1_norm", "cls_term", "reg_term", "objective",
        "attack_success_of_reversed", "mask", "pattern"}}
    return ReversalResult(doc["target_class"], np.array(doc["mask"]), np.array(doc["pattern"]), doc["l1_norm"],
                          doc["cls_term"], doc["reg_term"], doc["objective"], doc["attack_success_of_reversed"],
                          doc["method"], details)


# ---------------------------------------------------------------------------
# Pipeline

class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir, jobs: int = 1):
        self.config = config
        self.out = Path(out_dir)
        self.jobs = max(1, int(jobs))
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()

    # manifest -------------------------------------------------------------
    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"stages": {}}

    def _save_manifest(self):
        self.manifest["config_hash"] = _hash(self.config.to_dict())
        _write_json(self.manifest_path, self.manifest)
        _write_json(self.out / "config.json", self.config.to_dict())

    def stage_key(self, stage: str) -> str:
        c = self.config
        if stage == "gen-data":
            return _hash(["gen-data", c.dataset, c.seed])
        if stage == "train-zoo":
            return _hash(["train-zoo", self.stage_key("gen-data"), c.attack, c.poison_fraction, c.clean_label,
                          c.zoo["benign"], c.zoo["baseline"], c.target_classes, c.train])
        if stage == "pilot-defense":
            return _hash(["pilot", self.stage_key("train-zoo"), c.defense["nc"]])
        if stage == "plan-ar":
            return _hash(["plan", self.stage_key("pilot-defense"), c.ar_mode, c.epsilon])
        if stage == "train-lsp":
            return _hash(["train-lsp", self.stage_key("plan-ar"), c.zoo["lsp"]])
        if stage == "defend":
            return _hash(["defend", self.stage_key("train-lsp"), c.defense])
        if stage == "evaluate":
            return _hash(["evaluate", self.stage_key("defend")])
        if stage == "sweep":
            return _hash(["sweep", self.stage_key("train-zoo"), c.sweep, c.defense["nc"]])
        if stage == "report":
            parts = ["report", self.stage_key("evaluate")]
            if self.is_complete("sweep"):
                parts.append(self.stage_key("sweep"))
            return _hash(parts)
        raise ValueError(f"unknown stage {stage!r}")

    def is_complete(self, stage: str) -> bool:
        rec = self.manifest["stages"].get(stage)
        return bool(rec) and rec.get("status") == "complete" and rec.get("key") == self.stage_key(stage)

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage (prerequisites must be complete). Returns False when skipped."""
        if not force and self.is_complete(stage):
            log.info("stage %s up to date", stage)
            return False
        fn = getattr(self, "_stage_" + stage.replace("-", "_"))
        key = self.stage_key(stage)
        log.info("running stage %s", stage)
        t0 = time.perf_counter()
        try:
            outputs = fn() or {}
        except Exception as exc:
            self.manifest["stages"][stage] = {"key": key, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            self._save_manifest()
            raise StageError(stage, exc) from exc
        self.manifest["stages"][stage] = {"key": key, "status": "complete", "outputs": outputs,
                                          "seconds": round(time.perf_counter() - t0, 3)}
        self._save_manifest()
        return True

    def run(self, until: str = "report", sweep: bool | None = None) -> Path:
        """Run every stage up to ``until`` (inclusive), skipping up-to-date ones."""
        stages = list(STAGES)
        if until == "sweep":
            for s in ("gen-data", "train-zoo", "sweep"):
                self.run_stage(s)
            return self.out
        if until not in stages:
            raise ValueError(f"unknown stage {until!r}")
        do_sweep = bool(self.config.sweep.get("attack_rates")) if sweep is None else sweep
        for s in stages[:stages.index(until) + 1]:
            if s == "report" and do_sweep:
                self.run_stage("sweep")
            self.run_stage(s)
        return self.out

    # data -----------------------------------------------------------------
    def _data_dir(self, split):
        return self.out / "data" / split

    def _stage_gen_data(self):
        d, seed = self.config.dataset, self.config.seed
        if d["kind"] == "synthetic":
            args = (d["num_classes"], d["height"], d["width"])
            kw = {"channels": d.get("channels", 1), "noise": d.get("noise", 0.08)}
            k, h, w = args
            train_set = generate_synthetic_dataset(k, d["per_class_train"], h, w, derive_seed(seed, 100), **kw)
            test = generate_synthetic_dataset(k, d["per_class_test"], h, w, derive_seed(seed, 101), **kw)
            defense = generate_synthetic_dataset(k, d["per_class_defense"], h, w, derive_seed(seed, 102), **kw)
        elif d["kind"] == "idx":
            k = self.config.num_classes
            train_set = load_idx_dataset(d["train_images"], d["train_labels"], k)
            if d.get("max_train"):
                train_set = train_set.subset(np.arange(min(len(train_set), int(d["max_train"]))))
            full_test = load_idx_dataset(d["test_images"], d["test_labels"], k)
            n_def = int(d.get("defense_size", 200))
            if n_def >= len(full_test):
                raise ValueError("defense_size must leave test samples")
            defense = full_test.subset(np.arange(n_def))
            test = full_test.subset(np.arange(n_def, len(full_test)))
        else:
            raise ValueError(f"unknown dataset kind {d['kind']!r}")
        save_dataset(train_set.with_tag("benign_train"), self._data_dir("train"))
        save_dataset(test.with_tag("test"), self._data_dir("test"))
        save_dataset(defense.with_tag("test"), self._data_dir("defense"))
        return {"train": len(train_set), "test": len(test), "defense": len(defense),
                "image_shape": list(train_set.image_shape)}

    def image_shape(self):
        return tuple(self.manifest["stages"]["gen-data"]["outputs"]["image_shape"])

    # zoo ------------------------------------------------------------------
    def _member_jobs(self, group, count, attack_rate_for):
        c = self.config
        trigger_path = self.out / "zoo" / "trigger.json"
        jobs = []
        for r in range(count):
            model_id = f"{group}-{r:02d}"
            target = None if group == "benign" else int(c.target_classes[r % len(c.target_classes)])
            ar = attack_rate_for(target) if target is not None else None
            # benign and backdoored replicas r share an init seed; only the data differs
            seed = derive_seed(c.seed, 200, r) % (2 ** 31)
            train_cfg = asdict(c.train_config(seed))
            job = {"model_id": model_id, "group": group, "checkpoint": str(self.out / "zoo" / model_id),
                   "train_dir": str(self._data_dir("train")), "train": train_cfg, "seed": seed,
                   "target_class": target, "attack_rate": _num(ar), "trigger": str(trigger_path) if target is not None
                   else None, "poison_fraction": c.poison_fraction, "clean_label": c.clean_label}
            job["key"] = _hash([self.stage_key("gen-data"), c.attack, {k: v for k, v in job.items()
                                                                    if k not in ("checkpoint", "train_dir")}])
            jobs.append(job)
        return jobs

    def _register(self, jobs):
        entries = {e.model_id: e for e in load_zoo(self.out)}
        for j in jobs:
            entries[j["model_id"]] = ZooEntry(
                j["model_id"], j["group"], os.path.relpath(j["checkpoint"], self.out), j["target_class"] is not None,
                j["seed"], j["target_class"],
                os.path.relpath(j["trigger"], self.out) if j["trigger"] else None,
                float(j["attack_rate"]) if j["attack_rate"] is not None else None)
        _save_zoo(self.out, entries.values())

    def _stage_train_zoo(self):
        c = self.config
        save_trigger(make_trigger(c.attack, self.image_shape()), self.out / "zoo" / "trigger.json")
        jobs = (self._member_jobs("benign", c.zoo["benign"], lambda t: None)
                + self._member_jobs("baseline", c.zoo["baseline"], lambda t: math.inf))
        done = _run_jobs(_train_member, jobs, self.jobs)
        self._register(jobs)
        return {"models": [j["model_id"] for j in jobs], "reused": sum(d["reused"] for d in done)}

    def entries(self, group=None) -> list[ZooEntry]:
        return [e for e in load_zoo(self.out) if group is None or e.group == group]

    # pilot + plan -----------------------------------------------------------
    def _reverse_jobs(self, entries, classes_for, nc: dict, subdir: str):
        jobs = []
        for e in entries:
            for cls in classes_for(e):
                key = _hash([load_model_manifest(self.out / e.checkpoint).get("key"), nc, cls,
                             self.stage_key("gen-data")])
                jobs.append({"checkpoint": str(self.out / e.checkpoint), "defense_dir": str(self._data_dir("defense")),
                             "target_class": int(cls), "nc": nc, "key": key, "model_id": e.model_id,
                             "out": str(self.out / subdir / e.model_id / f"class{cls}.json")})
        return jobs

    def _stage_pilot_defense(self):
        nc = self.config.defense["nc"]
        targets = sorted({int(t) for t in self.config.target_classes})
        ents = self.entries("benign") + self.entries("baseline")
        jobs = self._reverse_jobs(ents, lambda e: targets if e.group == "benign" else [e.target_class], nc, "pilot")
        docs = _run_jobs(_reverse_one, jobs, self.jobs)
        return {"runs": [os.path.relpath(j["out"], self.out) for j in jobs],
                "norms": {f"{j['model_id']}/class{j['target_class']}": d["l1_norm"] for j, d in zip(jobs, docs)}}

    def _pilot_results(self, subdir="pilot"):
        out = {}
        for path in sorted((self.out / subdir).glob("*/class*.json")):
            doc = json.loads(path.read_text())
            out.setdefault((path.parent.name, doc["target_class"]), _result_from_doc(doc))
        return out

    def _stage_plan_ar(self):
        c = self.config
        k = c.num_classes
        runs = self._pilot_results()
        plans, warnings = {}, []
        for t in sorted({int(x) for x in c.target_classes}):
            ben = [r for (mid, cls), r in runs.items() if cls == t and mid.startswith("benign-")]
            poi_ids = {e.model_id for e in self.entries("baseline") if e.target_class == t}
            poi = [r for (mid, cls), r in runs.items() if cls == t and mid in poi_ids]
            bound = plan_attack(ben, poi, c.epsilon, k, {"stage": "pilot-defense"})
            if c.ar_mode["mode"] == "fixed":
                ar = float(c.ar_mode["value"])
            else:
                ar = deployment_attack_rate(bound.max_attack_rate, c.ar_mode.get("safety_factor", 0.9))
            feasible = ar > 1.0 and (c.ar_mode["mode"] == "fixed" or bound.feasible)
            if not feasible:
                msg = f"attack infeasible for target {t}: attack rate {ar:.4f} <= 1"
                log.warning(msg)
                warnings.append(msg)
            plans[str(t)] = {"bound": bound.to_dict(), "attack_rate": _num(ar), "feasible": feasible}
        doc = {"mode": c.ar_mode, "epsilon": c.epsilon, "targets": plans, "warnings": warnings}
        _write_json(self.out / "plan.json", doc)
        return {"attack_rates": {t: p["attack_rate"] for t, p in plans.items()}, "warnings": warnings}

    def plan(self) -> dict:
        return json.loads((self.out / "plan.json").read_text())

    def _stage_train_lsp(self):
        plan = self.plan()["targets"]
        jobs = self._member_jobs("lsp", self.config.zoo["lsp"], lambda t: float(plan[str(t)]["attack_rate"]))
        done = _run_jobs(_train_member, jobs, self.jobs)
        self._register(jobs)
        return {"models": [j["model_id"] for j in jobs], "reused": sum(d["reused"] for d in done)}

    # defense + evaluation ---------------------------------------------------
    def _stage_defend(self):
        det = self.config.detect_config().to_dict()
        jobs = []
        for e in self.entries():
            for method in self.config.defense["methods"]:
                key = _hash([load_model_manifest(self.out / e.checkpoint).get("key"), method, det,
                             self.stage_key("gen-data")])
                jobs.append({"checkpoint": str(self.out / e.checkpoint), "defense_dir": str(self._data_dir("defense")),
                             "method": method, "detect": det, "key": key,
                             "out": str(self.out / "defense" / e.model_id)})
        reports = _run_jobs(_defend_member, jobs, self.jobs)
        return {"reports": [os.path.relpath(r, self.out) for r in reports]}

    def verdicts(self, method: str) -> dict:
        return {e.model_id: load_verdict(self.out / "defense" / e.model_id / f"{method}_report.json")
                for e in self.entries()}

    def _stage_evaluate(self):
        c = self.config
        test = load_dataset(self._data_dir("test"))
        entries = self.entries()
        rows = []
        verdicts = {m: self.verdicts(m) for m in c.defense["methods"]}
        for e in entries:
            e.metrics = entry_metrics(self.out, e, test, verdicts)
        _save_zoo(self.out, entries)

        summary = {"groups": {}, "detection": {}, "norm_ratio": {}, "plan": self.plan()["targets"]}
        for g in GROUPS:
            ms = [e.metrics for e in entries if e.group == g]
            summary["groups"][g] = {
                "n": len(ms),
                "benign_accuracy": float(np.mean([m["benign_accuracy"] for m in ms])),
                "attack_success_rate": (float(np.mean([m["attack_success_rate"] for m in ms]))
                                        if g != "benign" else None)}
        bases = {"nc": c.defense["mad_threshold"], "abs": c.defense["abs_threshold"]}
        for method, vs in verdicts.items():
            benign_ids = [e.model_id for e in entries if e.group == "benign"]
            threshold = calibrate_threshold([vs[i] for i in benign_ids], bases[method], c.defense["max_benign_fpr"])
            res = {"threshold": threshold, "default_threshold": bases[method]}
            for g in ("baseline", "lsp"):
                pairs = [(vs[e.model_id].rethreshold(threshold), e.backdoored) for e in entries
                         if e.group in ("benign", g)]
                calls = np.array([v.is_backdoored for v, _ in pairs])
                truth = np.array([t for _, t in pairs])
                res[g] = {"acc": float(np.mean(calls == truth)),
                          "ap": average_precision([v.score_for_ap for v, _ in pairs], truth),
                          "tpr": float(np.mean(calls[truth])), "fpr": float(np.mean(calls[~truth]))}
            summary["detection"][method] = res
            for e in entries:
                e.metrics[f"{method}_calibrated_verdict"] = bool(vs[e.model_id].rethreshold(threshold).is_backdoored)
        if "nc" in verdicts:
            summary["norm_ratio"] = norm_ratios(entries, verdicts["nc"])
        _save_zoo(self.out, entries)
        for e in entries:
            rows.append({"model_id": e.model_id, "group": e.group, "backdoored": e.backdoored,
                         "target_class": e.target_class, "attack_rate": _num(e.attack_rate), **e.metrics})
        _write_csv(self.out / "eval" / "models.csv", rows)
        _write_json(self.out / "eval" / "summary.json", summary)
        return {"summary": "eval/summary.json"}

    def summary(self) -> dict:
        return json.loads((self.out / "eval" / "summary.json").read_text())

    # attack-rate sweep ------------------------------------------------------
    def _stage_sweep(self):
        c = self.config
        sw = c.sweep
        nc = sw.get("nc") or c.defense["nc"]
        rates = [float(a) for a in sw["attack_rates"]]
        if not rates:
            raise ValueError("sweep.attack_rates is empty")
        target = int(c.target_classes[0])
        trigger_path = self.out / "zoo" / "trigger.json"
        jobs = []
        for ar in rates:
            for r in range(int(sw.get("replicas", 2))):
                seed = derive_seed(c.seed, 300, r) % (2 ** 31)
                model_id = f"sweep-ar{ar:g}-{r:02d}"
                job = {"model_id": model_id, "group": "sweep", "checkpoint": str(self.out / "sweep" / "models" / model_id),
                       "train_dir": str(self._data_dir("train")), "train": asdict(c.train_config(seed)), "seed": seed,
                       "target_class": target, "attack_rate": _num(ar), "trigger": str(trigger_path),
                       "poison_fraction": c.poison_fraction, "clean_label": c.clean_label}
                job["key"] = _hash([self.stage_key("gen-data"), c.attack, {k: v for k, v in job.items()
                                                                        if k not in ("checkpoint", "train_dir")}])
                jobs.append(job)
        _run_jobs(_train_member, jobs, self.jobs)
        sweep_entries = [ZooEntry(j["model_id"], "sweep", os.path.relpath(j["checkpoint"], self.out), True, j["seed"],
                                  target, os.path.relpath(trigger_path, self.out), float(j["attack_rate"]))
                         for j in jobs]
        benign = self.entries("benign")
        rjobs = self._reverse_jobs(benign + sweep_entries, lambda e: [target], nc, "sweep/nc")
        docs = {j["model_id"]: d for j, d in zip(rjobs, _run_jobs(_reverse_one, rjobs, self.jobs))}

        # bound for this NC config: benign zoo vs the one-hot (ar = inf) sweep models
        ben = [_result_from_doc(docs[e.model_id]) for e in benign]
        inf_ids = [e.model_id for e in sweep_entries if e.attack_rate == math.inf]
        bound = (plan_attack(ben, [_result_from_doc(docs[i]) for i in inf_ids], c.epsilon, c.num_classes,
                             {"stage": "sweep"}) if inf_ids else None)

        test = load_dataset(self._data_dir("test"))
        trigger = load_trigger(trigger_path)
        gt = _gt_mask(trigger)
        rows = []
        for e in sweep_entries:
            model = load_model(self.out / e.checkpoint)
            d = docs[e.model_id]
            reasr = (reattack_success_rate(model, test, gt, np.array(d["mask"]), np.array(d["pattern"]), target)
                     if gt is not None else None)
            rows.append({"model_id": e.model_id, "attack_rate": _num(e.attack_rate), "target_norm": d["l1_norm"],
                         "cls_term": d["cls_term"], "reg_term": d["reg_term"], "objective": d["objective"],
                         "reasr": reasr, "asr": attack_success_rate(model, test, trigger, target,
                                                                    rng=np.random.default_rng(0)),
                         "benign_accuracy": benign_accuracy(model, test)})
        ben_norms = [docs[e.model_id]["l1_norm"] for e in benign]
        ben_obj = float(np.mean([docs[e.model_id]["objective"] for e in benign]))
        agg = []
        for ar in rates:
            rs = [row for row in rows if float(row["attack_rate"]) == ar]
            norms = np.array([row["target_norm"] for row in rs])
            q1, q2, q3 = np.percentile(norms, [25, 50, 75])
            agg.append({"attack_rate": _num(ar), "mean_reasr": _mean_or_none([row["reasr"] for row in rs]),
                        "mean_asr": float(np.mean([row["asr"] for row in rs])),
                        "norm_q1": q1, "norm_median": q2, "norm_q3": q3,
                        "mean_objective": float(np.mean([row["objective"] for row in rs])),
                        "benign_objective": ben_obj})
        _write_csv(self.out / "sweep" / "runs.csv", rows)
        _write_csv(self.out / "sweep" / "ar_sweep.csv", agg)
        doc = {"target_class": target, "nc": nc, "benign_norms": ben_norms,
               "bound": bound.to_dict() if bound else None, "rows": rows, "aggregate": agg}
        _write_json(self.out / "sweep" / "sweep.json", doc)
        return {"sweep": "sweep/sweep.json"}

    def sweep_result(self) -> dict:
        return json.loads((self.out / "sweep" / "sweep.json").read_text())

    # report -----------------------------------------------------------------
    def _stage_report(self):
        return {"files": [os.path.relpath(p, self.out) for p in report_tables(self.out)]}


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _gt_mask(trigger):
    try:
        return ground_truth_mask(trigger)
    except ValueError:
        return None


def entry_metrics(out_dir, entry: ZooEntry, test: LabeledDataset, verdicts: dict | None = None) -> dict:
    """BA / ASR / ReASR and defense readouts for one zoo member, from its checkpoint."""
    out_dir = Path(out_dir)
    model = load_model(out_dir / entry.checkpoint)
    m = {"benign_accuracy": benign_accuracy(model, test)}
    if verdicts is None:
        verdicts = {}
        for p in sorted((out_dir / "defense" / entry.model_id).glob("*_report.json")):
            v = load_verdict(p)
            verdicts[v.method] = {entry.model_id: v}
    if entry.backdoored:
        trigger = load_trigger(out_dir / entry.trigger)
        m["attack_success_rate"] = attack_success_rate(model, test, trigger, entry.target_class,
                                                       rng=np.random.default_rng(0))
    for method, vs in sorted(verdicts.items()):
        v = vs[entry.model_id]
        m[f"{method}_verdict"] = bool(v.is_backdoored)
        m[f"{method}_score"] = float(v.score_for_ap)
        if entry.backdoored:
            r = next(r for r in v.results if r.target_class == entry.target_class)
            m[f"{method}_target_score"] = float(v.per_class_scores[entry.target_class])
            m[f"{method}_target_flagged"] = entry.target_class in v.flagged_classes
            gt = _gt_mask(load_trigger(out_dir / entry.trigger))
            if gt is not None:
                m[f"{method}_reasr"] = reattack_success_rate(model, test, gt, r.mask, r.pattern, entry.target_class)
    return m


def calibrate_threshold(benign_verdicts, base: float, max_fpr: float) -> float:
    """Smallest threshold >= ``base`` that keeps the benign false-positive rate <= ``max_fpr``."""
    if not benign_verdicts:
        return base
    candidates = [base] + sorted(float(np.nextafter(v.score_for_ap, np.inf)) for v in benign_verdicts
                                 if v.score_for_ap >= base)
    for t in candidates:
        fpr = np.mean([v.rethreshold(t).is_backdoored for v in benign_verdicts])
        if fpr <= max_fpr:
            return float(t)
    return float(candidates[-1])


def norm_ratios(entries, nc_verdicts) -> dict:
    """Per group: median target-class norm over the benign median of the same class."""
    out = {}
    for g in ("baseline", "lsp"):
        ratios = []
        for e in entries:
            if e.group != g:
                continue
            ben = np.median([nc_verdicts[b.model_id].per_class_scores[e.target_class]
                             for b in entries if b.group == "benign"])
            ratios.append(float(nc_verdicts[e.model_id].per_class_scores[e.target_class]) / ben)
        out[g] = {"median_ratio": float(np.median(ratios)), "ratios": ratios}
    return out


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})


def _fmt(x, nd=3):
    if x is None:
        return "-"
    if isinstance(x, str):
        return x
    return f"{x:.{nd}f}"


def report_tables(out_dir) -> list[Path]:
    """Write the summary, norm-matrix and sweep tables; returns the files written."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text()) if (out_dir / "manifest.json").exists() else {}
    stages = manifest.get("stages", {})
    missing = [s for s in STAGES[:-1] if stages.get(s, {}).get("status") != "complete"]
    if missing:
        raise IncompleteRunError(f"run directory is missing stages: {', '.join(missing)}")
    rep = out_dir / "report"
    rep.mkdir(parents=True, exist_ok=True)
    summary = json.loads((out_dir / "eval" / "summary.json").read_text())
    entries = load_zoo(out_dir)
    written = []

    # (a) attack / defense summary
    methods = sorted(summary["detection"])
    rows = []
    for g in GROUPS:
        gs = summary["groups"][g]
        row = {"group": g, "n": gs["n"], "BA": gs["benign_accuracy"], "ASR": gs["attack_success_rate"]}
        for m in methods:
            d = summary["detection"][m].get(g) if g != "benign" else None
            row[f"{m}_ACC"] = d["acc"] if d else None
            row[f"{m}_AP"] = d["ap"] if d else None
        rows.append(row)
    _write_csv(rep / "summary.csv", rows)
    head = list(rows[0])
    md = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    md += ["| " + " | ".join(_fmt(r[h]) if not isinstance(r[h], int) or isinstance(r[h], bool) else str(r[h])
                             for h in head) + " |" for r in rows]
    (rep / "summary.md").write_text("\n".join(md) + "\n")
    written += [rep / "summary.csv", rep / "summary.md"]

    # (b) averaged per-class NC norm matrix, true target marked with '*'
    if "nc" in methods:
        norms = {e.model_id: load_verdict(out_dir / "defense" / e.model_id / "nc_report.json").per_class_scores
                 for e in entries}
        k = len(next(iter(norms.values())))
        mrows = []
        ben = [norms[e.model_id] for e in entries if e.group == "benign"]
        mrows.append(("benign", None, np.mean(ben, axis=0)))
        for g in ("baseline", "lsp"):
            for t in sorted({e.target_class for e in entries if e.group == g}):
                ns = [norms[e.model_id] for e in entries if e.group == g and e.target_class == t]
                mrows.append((f"{g} (target {t})", t, np.mean(ns, axis=0)))
        csv_rows, md = [], ["| model | " + " | ".join(str(i) for i in range(k)) + " |", "|" + "---|" * (k + 1)]
        for name, t, vec in mrows:
            csv_rows.append({"model": name, "target": t, **{str(i): float(vec[i]) for i in range(k)}})
            cells = [f"{v:.1f}*" if i == t else f"{v:.1f}" for i, v in enumerate(vec)]
            md.append(f"| {name} | " + " | ".join(cells) + " |")
        _write_csv(rep / "norm_matrix.csv", csv_rows)
        (rep / "norm_matrix.md").write_text("\n".join(md) + "\n")
        written += [rep / "norm_matrix.csv", rep / "norm_matrix.md"]

    # (c) attack-rate sweep
    sweep_json = out_dir / "sweep" / "sweep.json"
    if sweep_json.exists():
        doc = json.loads(sweep_json.read_text())
        _write_csv(rep / "ar_sweep.csv", doc["aggregate"])
        written.append(rep / "ar_sweep.csv")
    return written


def run_pipeline(config: ExperimentConfig, out_dir, jobs: int = 1, until: str = "report") -> Path:
    return Pipeline(config, out_dir, jobs).run(until)
