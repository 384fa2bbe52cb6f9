import json
import time

import numpy as np
import pytest

from lsplab.cli import main
from lsplab.core import load_dataset
from lsplab.pipeline import (STAGES, ExperimentConfig, IncompleteRunError, Pipeline, StageError, entry_metrics,
                             load_zoo, minimal_config, report_tables, run_pipeline)


@pytest.fixture(scope="module")
def minimal_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    t0 = time.perf_counter()
    run_pipeline(minimal_config(), out)
    return out, time.perf_counter() - t0


def test_minimal_run_produces_artifacts(minimal_run):
    out, elapsed = minimal_run
    assert elapsed < 300
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(manifest["stages"][s]["status"] == "complete" for s in STAGES)
    for rel in ("eval/summary.json", "eval/models.csv", "report/summary.md", "report/norm_matrix.md", "plan.json"):
        assert (out / rel).exists(), rel
    zoo = load_zoo(out)
    assert sorted({e.group for e in zoo}) == ["baseline", "benign", "lsp"]
    md = (out / "report" / "norm_matrix.md").read_text()
    assert "*" in md


def test_rerun_skips_every_stage(minimal_run):
    out, _ = minimal_run
    pipe = Pipeline(minimal_config(), out)
    assert all(pipe.is_complete(s) for s in STAGES)
    assert not any(pipe.run_stage(s) for s in STAGES)


def test_same_seed_same_summary(minimal_run, tmp_path):
    out, _ = minimal_run
    run_pipeline(minimal_config(), tmp_path, jobs=2)
    assert (tmp_path / "eval" / "summary.json").read_bytes() == (out / "eval" / "summary.json").read_bytes()


def test_config_change_invalidates_downstream(minimal_run):
    out, _ = minimal_run
    doc = minimal_config().to_dict()
    doc["defense"]["mad_threshold"] = 2.5
    pipe = Pipeline(ExperimentConfig.from_dict(doc), out)
    assert pipe.is_complete("train-lsp")
    assert not pipe.is_complete("defend") and not pipe.is_complete("evaluate")
    doc = minimal_config().to_dict()
    doc["ar_mode"] = {"mode": "fixed", "value": 3.0}
    pipe = Pipeline(ExperimentConfig.from_dict(doc), out)
    assert pipe.is_complete("pilot-defense") and not pipe.is_complete("plan-ar")


def test_entry_metrics_recomputable(minimal_run):
    out, _ = minimal_run
    test = load_dataset(out / "data" / "test")
    for entry in load_zoo(out):
        fresh = entry_metrics(out, entry, test)
        for k, v in fresh.items():
            assert entry.metrics[k] == pytest.approx(v), (entry.model_id, k)


def test_summary_contents(minimal_run):
    out, _ = minimal_run
    s = json.loads((out / "eval" / "summary.json").read_text())
    nc = s["detection"]["nc"]
    assert nc["threshold"] >= nc["default_threshold"]
    for g in ("baseline", "lsp"):
        assert 0 <= nc[g]["acc"] <= 1 and 0 <= nc[g]["ap"] <= 1
    assert nc["baseline"]["fpr"] <= 1 / 6 + 1e-12
    assert s["groups"]["baseline"]["attack_success_rate"] > 0.9


def test_infeasible_rate_warns(tmp_path, capsys):
    doc = minimal_config().to_dict()
    doc["ar_mode"] = {"mode": "fixed", "value": 1.0}
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert main(["plan-ar", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 0
    err = capsys.readouterr().err
    assert "attack infeasible" in err
    plan = json.loads((tmp_path / "o" / "plan.json").read_text())
    assert plan["targets"]["0"]["feasible"] is False


def test_report_on_incomplete_dir(tmp_path):
    Pipeline(minimal_config(), tmp_path).run_stage("gen-data")
    with pytest.raises(IncompleteRunError, match="train-zoo"):
        report_tables(tmp_path)


def test_failed_stage_is_recorded(tmp_path):
    pipe = Pipeline(minimal_config(), tmp_path)
    with pytest.raises(StageError) as info:
        pipe.run_stage("train-zoo")  # data stage has not run
    assert info.value.stage == "train-zoo"
    assert json.loads((tmp_path / "manifest.json").read_text())["stages"]["train-zoo"]["status"] == "failed"


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"zoo": {"benign": 0}}))
    assert main(["gen-data", "--config", str(bad), "--out-dir", str(tmp_path / "a")]) == 2
    assert main(["show-config", "--minimal"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["dataset"]["num_classes"] == 4
    assert main(["gen-data", "--minimal", "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "data" / "train").exists()
    # a corrupted dataset makes the next stage fail with its name on stderr
    for f in (tmp_path / "b" / "data" / "train").iterdir():
        f.write_bytes(b"garbage")
    capsys.readouterr()
    assert main(["train-zoo", "--minimal", "--out-dir", str(tmp_path / "b")]) == 1
    assert "stage train-zoo" in capsys.readouterr().err


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(target_classes=[12])
    with pytest.raises(ValueError):
        ExperimentConfig(ar_mode={"mode": "fixed"})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": "red"})
    cfg = minimal_config(seed=3)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_determinism_of_models(minimal_run, tmp_path):
    out, _ = minimal_run
    Pipeline(minimal_config(), tmp_path).run("train-zoo")
    a = np.fromfile(out / load_zoo(out)[0].checkpoint / "layer0_W.f32", dtype=np.float32)
    b = np.fromfile(tmp_path / load_zoo(tmp_path)[0].checkpoint / "layer0_W.f32", dtype=np.float32)
    np.testing.assert_array_equal(a, b)
