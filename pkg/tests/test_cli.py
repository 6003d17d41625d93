import json

import pandas as pd
import pytest
import torch

from geowalk.core.errors import InvalidSpecError
from geowalk.routers.utils import api_pipeline_utils
from geowalk.services import manifold as mf
from main import main


def run(*argv):
    return main([str(a) for a in argv])


def summary(out_dir):
    return json.loads((out_dir / "summary.json").read_text())


class TestUsage:
    def test_no_command(self):
        assert run() == 2

    def test_missing_out(self):
        assert run("synth") == 2

    def test_unknown_option(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--bogus") == 2

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"synth": {"n": 10, "colour": "red"}}))
        assert run("synth", "--out", tmp_path / "run", "--config", config) == 2

    def test_missing_config_file(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--config", tmp_path / "absent.json") == 2

    def test_missing_upstream_artifact(self, tmp_path):
        assert run("build-graph", "--out", tmp_path) == 3
        assert run("evaluate", "--out", tmp_path) == 3
        assert run("analyze-experts", "--out", tmp_path) == 3

    def test_invalid_manifold_spec_is_usage_error(self, tmp_path, monkeypatch):
        def reject(*args, **kwargs):
            raise InvalidSpecError("hyperbolic spec requires curvature < 0, got 1.0")

        monkeypatch.setattr(api_pipeline_utils, "synth_catalog", reject)
        assert run("synth", "--out", tmp_path) == 2


class TestSynth:
    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--out", tmp_path / name, "--seed", 7, "--n", 500, "--feature-dim", 8) == 0
        for file in ("catalog.csv", "targets.csv"):
            assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()

    def test_summary_and_resolved_config(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--seed", 3, "--n", 30, "--clusters", 2, "--feature-dim", 4) == 0
        report = summary(tmp_path)
        assert report["command"] == "synth"
        assert report["results"]["n"] == 30
        assert report["metadata"]["format_version"] == "1"
        resolved = json.loads((tmp_path / "resolved_config.json").read_text())
        assert resolved["seed"] == 3
        assert resolved["synth"]["feature_dim"] == 4

    def test_config_hash_ignores_run_time(self, tmp_path):
        for name in ("a", "b"):
            run("synth", "--out", tmp_path / name, "--n", 20, "--clusters", 1, "--feature-dim", 2)
        assert summary(tmp_path / "a")["config_hash"] == summary(tmp_path / "b")["config_hash"]


class TestEvaluate:
    def test_perfect_predictions(self, tmp_path):
        path = tmp_path / "predictions.csv"
        pd.DataFrame(
            {
                "id": ["a", "b", "c", "d"],
                "regression_target": [0.5, 1.5, 2.0, 4.0],
                "regression_pred": [0.5, 1.5, 2.0, 4.0],
                "class_target": [0, 1, 2, 1],
                "class_pred": [0, 1, 2, 1],
            }
        ).to_csv(path, index=False)
        assert run("evaluate", "--out", tmp_path / "eval", "--predictions", path) == 0
        results = summary(tmp_path / "eval")["results"]
        assert results == {"n": 4, "r2": 1.0, "f1": 1.0}

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "predictions.csv"
        path.write_text("id,regression_pred\na,1.0\n")
        assert run("evaluate", "--out", tmp_path, "--predictions", path) == 2


def test_analyze_experts_single_record(tmp_path):
    trace = tmp_path / "gate_trace.csv"
    trace.write_text("task,token_index,w_e,w_s,w_h\nregression,0,0.5,0.3,0.2\n")
    assert run("analyze-experts", "--out", tmp_path / "experts", "--trace", trace) == 0
    results = summary(tmp_path / "experts")["results"]
    assert results["records"] == 1
    assert results["contributions"]["regression"] == pytest.approx({"w_e": 0.5, "w_s": 0.3, "w_h": 0.2})
    assert (tmp_path / "experts" / "expert_contributions.csv").is_file()


class TestCheck:
    def test_selected_checks_pass(self, tmp_path):
        report = tmp_path / "checks.json"
        assert run("check", "--only", "lorentz_inner_example", "smooth_l1_examples", "--report", report) == 0
        assert json.loads(report.read_text())["passed"] == 2

    def test_failure_exits_one(self, monkeypatch):
        monkeypatch.setattr(mf, "lorentz_inner", lambda a, b: torch.tensor(1.0))
        assert run("check", "--only", "lorentz_inner_example") == 1

    def test_unknown_check(self):
        assert run("check", "--only", "no_such_check") == 2

    def test_list(self, capsys):
        assert run("check", "--list") == 0
        assert "lorentz_inner_example" in capsys.readouterr().out.split()


@pytest.mark.slow
def test_full_pipeline(tmp_path, desk_config):
    out = tmp_path / "desk"
    for command in ("synth", "build-graph", "train-prompt", "train-adapter", "evaluate", "analyze-experts"):
        assert run(command, "--out", out, "--config", desk_config) == 0, command
        assert summary(out)["command"] == command

    for name in (
        "catalog.csv",
        "graph_euclidean.txt",
        "graph_hyperbolic.txt",
        "graph_spherical.txt",
        "prompts_euclidean.csv",
        "prompt_encoder.json",
        "host_model.json",
        "predictions.csv",
        "gate_trace.csv",
        "split.csv",
        "metric_trace.csv",
    ):
        assert (out / name).is_file(), name

    predictions = pd.read_csv(out / "predictions.csv", dtype={"id": str})
    assert len(predictions) == 12
    split = pd.read_csv(out / "split.csv", dtype={"id": str})
    assert set(predictions["id"]) == set(split.loc[split["split"] == "val", "id"])
    assert set(pd.read_csv(out / "gate_trace.csv")["task"]) == {"regression", "classification"}


@pytest.mark.slow
def test_sweep_and_ablation(tmp_path, desk_config):
    data = tmp_path / "data"
    for command in ("synth", "build-graph", "train-prompt"):
        assert run(command, "--out", data, "--config", desk_config) == 0, command

    sweep_dir = tmp_path / "sweep"
    assert run("sweep", "--out", sweep_dir, "--data", data, "--config", desk_config) == 0
    runs = summary(sweep_dir)["results"]["runs"]
    assert [r["period"] for r in runs] == [1, 2]
    assert [r["adapter_layers"] for r in runs] == ["1 2", "2"]
    assert all(r["error"] is None for r in runs)
    assert (sweep_dir / "sweep_summary.csv").is_file()

    ablate_dir = tmp_path / "ablate"
    assert run("ablate", "--out", ablate_dir, "--data", data, "--config", desk_config) == 0
    report = summary(ablate_dir)["results"]
    assert report["euclidean_control"]["expert_kinds"] == ["euclidean", "euclidean", "euclidean"]
    assert isinstance(report["geometry_beats_control"], bool)


REFERENCE_COMMANDS = ("synth", "build-graph", "train-prompt", "train-adapter", "evaluate")
REFERENCE_FILES = (
    "catalog.csv",
    "targets.csv",
    "graph_euclidean.txt",
    "graph_hyperbolic.txt",
    "graph_spherical.txt",
    "prompt_encoder.json",
    "prompts_hyperbolic.csv",
    "loss_trace_hyperbolic.csv",
    "split.csv",
    "host_model.json",
    "metric_trace.csv",
    "predictions.csv",
    "gate_trace.csv",
)


@pytest.fixture(scope="module")
def reference_config(tmp_path_factory):
    """Default settings with narrower features and prompts"""
    path = tmp_path_factory.mktemp("config") / "reference.json"
    path.write_text(
        json.dumps({"seed": 5, "synth": {"feature_dim": 64}, "prompt": {"hidden_dim": 64, "out_dim": 32}})
    )
    return path


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory, reference_config):
    out = tmp_path_factory.mktemp("reference")
    for command in REFERENCE_COMMANDS:
        assert run(command, "--out", out, "--config", reference_config) == 0, command
    return out


@pytest.mark.slow
class TestReferenceRun:
    def test_scores(self, reference_run):
        results = summary(reference_run)["results"]
        assert results["n"] == 400
        assert results["f1"] >= 0.9
        assert results["r2"] >= 0.8

    def test_same_seed_same_bytes(self, tmp_path, reference_run, reference_config):
        for command in REFERENCE_COMMANDS:
            assert run(command, "--out", tmp_path, "--config", reference_config) == 0, command
        for name in REFERENCE_FILES:
            assert (tmp_path / name).read_bytes() == (reference_run / name).read_bytes(), name

    def test_geometry_ablation(self, tmp_path, reference_run, reference_config):
        assert run("ablate", "--out", tmp_path, "--data", reference_run, "--config", reference_config) == 0
        report = summary(tmp_path)["results"]
        extra = report["geometry"]["trainable_parameters"] - report["euclidean_control"]["trainable_parameters"]
        assert extra == 4  # learnable kappa and c in each of the two adapters
        assert report["geometry_beats_control"] is True
        assert report["hyperbolic_prefers_hierarchy"] is True

    def test_dense_insertion_converges_no_later(self, tmp_path, reference_run, reference_config):
        assert run("sweep", "--out", tmp_path, "--data", reference_run, "--config", reference_config) == 0
        runs = {r["period"]: r for r in summary(tmp_path)["results"]["runs"]}
        assert sorted(runs) == [1, 2, 4]
        assert all(r["error"] is None for r in runs.values())
        assert runs[1]["steps_to_threshold"] is not None
        assert runs[1]["steps_to_threshold"] <= runs[4]["steps_to_threshold"]
