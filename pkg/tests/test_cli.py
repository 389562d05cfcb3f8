"""Command-line surface: exit codes, artifact files, determinism."""

import json
import os

import numpy as np
import pytest

from thermoforge import cli as cli_mod
from thermoforge.cli import _split_sizes, _workers, main
from thermoforge.composer import ComplexSystemSpec, NodeGroup
from thermoforge.config_enum import TANK, ConfigGraph, enumerate_single_split
from thermoforge.errors import DivergenceError, ValidationError
from thermoforge.knowledge import FeatureSpec, KnnModel, load_model, save_model
from thermoforge.study_runner import config_list_hash, load_dataset


def run(*args):
    return main(list(args))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: enumerated configs, a tiny 2-node study, a trained model."""
    root = tmp_path_factory.mktemp("cli")

    assert run("enumerate", "--nodes", "1", "--out", str(root / "cfg1")) == 0
    assert run("enumerate", "--nodes", "2", "--out", str(root / "cfg2")) == 0

    spec = {"n_nodes": 2, "n_pop": 5, "seed": 0, "solver": {"segments": 8}}
    spec_path = root / "study.json"
    spec_path.write_text(json.dumps(spec))
    ds_path = root / "ds.csv"
    assert run(
        "study", "--spec", str(spec_path), "--workers", "1", "--out", str(ds_path)
    ) == 0

    model_path = root / "models" / "model_2.json"
    model_path.parent.mkdir()
    assert run(
        "train", "--dataset", str(ds_path), "--k", "3", "--model", str(model_path)
    ) == 0
    return root


class TestHelpers:
    def test_workers_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv("THERMOFORGE_WORKERS", "7")
        assert _workers(2) == 2
        assert _workers(None) == 7

    def test_workers_env_unset_falls_back(self, monkeypatch):
        monkeypatch.delenv("THERMOFORGE_WORKERS", raising=False)
        assert _workers(None) >= 1

    def test_workers_rejects_bad_values(self, monkeypatch):
        with pytest.raises(ValidationError):
            _workers(0)
        monkeypatch.setenv("THERMOFORGE_WORKERS", "many")
        with pytest.raises(ValidationError):
            _workers(None)

    def test_split_sizes(self):
        assert _split_sizes(10, 0.7) == 7
        assert _split_sizes(2, 0.99) == 1  # always leaves a test row
        assert _split_sizes(50, 0.01) == 1
        with pytest.raises(ValidationError):
            _split_sizes(10, 1.0)


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0
        assert "enumerate" in capsys.readouterr().out

    def test_unknown_command(self):
        assert run("frobnicate") == 1

    def test_missing_required_option(self):
        assert run("enumerate") == 1

    def test_nonexistent_config_path(self, tmp_path):
        rc = run(
            "solve", "--config", str(tmp_path / "nope.json"),
            "--loads", "5", "--out", str(tmp_path / "o.json"),
        )
        assert rc == 1

    def test_malformed_config_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = run(
            "simulate", "--config", str(bad),
            "--loads", "5", "--out", str(tmp_path / "o.json"),
        )
        assert rc == 1

    def test_loads_length_mismatch(self, ws, tmp_path):
        rc = run(
            "simulate", "--config", str(ws / "cfg1" / "config_000.json"),
            "--loads", "5,5", "--out", str(tmp_path / "o.json"),
        )
        assert rc == 1

    def test_unwritable_out_is_io_error(self, ws, tmp_path):
        rc = run(
            "simulate", "--config", str(ws / "cfg1" / "config_000.json"),
            "--loads", "8", "--out", str(tmp_path / "missing" / "o.json"),
        )
        assert rc == 3
        assert not (tmp_path / "missing").exists()

    def test_nonconverged_solve_exits_two(self, ws, tmp_path, monkeypatch):
        class Stub:
            converged = False
            t_end = 1.0

            def to_dict(self):
                return {"t_end": 1.0, "converged": False}

        monkeypatch.setattr(cli_mod, "solve", lambda *a, **k: Stub())
        out = tmp_path / "sol.json"
        rc = run(
            "solve", "--config", str(ws / "cfg1" / "config_000.json"),
            "--loads", "8", "--out", str(out),
        )
        assert rc == 2
        assert read_json(out)["converged"] is False  # artifact still written

    def test_divergence_maps_to_two(self, ws, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise DivergenceError("no feasible flow")

        monkeypatch.setattr(cli_mod, "solve", boom)
        rc = run(
            "solve", "--config", str(ws / "cfg1" / "config_000.json"),
            "--loads", "8", "--out", str(tmp_path / "o.json"),
        )
        assert rc == 2


class TestEnumerate:
    def test_files_and_index(self, ws):
        idx = read_json(ws / "cfg2" / "index.json")
        assert idx["count"] == 3
        assert idx["files"] == [f"config_{i:03d}.json" for i in range(3)]
        assert idx["config_hash"] == config_list_hash(enumerate_single_split(2))
        for name in idx["files"]:
            g = ConfigGraph.from_json((ws / "cfg2" / name).read_text())
            assert g.n_nodes == 2

    def test_multi_split_depth(self, tmp_path):
        assert run(
            "enumerate", "--nodes", "3", "--mode", "multi", "--out", str(tmp_path)
        ) == 0
        assert read_json(tmp_path / "index.json")["count"] == 3

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        assert run("enumerate", "--nodes", "2", "--out", str(tmp_path)) == 0
        for name in os.listdir(ws / "cfg2"):
            assert (tmp_path / name).read_bytes() == (ws / "cfg2" / name).read_bytes()

    def test_artifacts_echoed(self, tmp_path, capsys):
        assert run("enumerate", "--nodes", "1", "--out", str(tmp_path)) == 0
        out = capsys.readouterr().out
        assert "wrote 1 configurations" in out
        assert str(tmp_path / "index.json") in out

    def test_too_many_nodes(self, tmp_path):
        assert run("enumerate", "--nodes", "7", "--out", str(tmp_path)) == 1


class TestSimulateSolve:
    def test_simulate_single_node(self, ws, tmp_path):
        out = tmp_path / "sim.json"
        rc = run(
            "simulate", "--config", str(ws / "cfg1" / "config_000.json"),
            "--loads", "8", "--out", str(out),
        )
        assert rc == 0
        obj = read_json(out)
        assert obj["policy"] == "equal"
        assert obj["endurance"] == pytest.approx(16.02, abs=0.05)
        assert obj["independent_flows"] == []

    def test_simulate_short_horizon_reports_none(self, ws, tmp_path):
        out = tmp_path / "sim.json"
        rc = run(
            "simulate", "--config", str(ws / "cfg1" / "config_000.json"),
            "--loads", "8", "--horizon", "0.5", "--out", str(out),
        )
        assert rc == 0
        assert read_json(out)["endurance"] is None

    def test_solve_single_node(self, ws, tmp_path):
        out = tmp_path / "sol.json"
        rc = run(
            "solve", "--config", str(ws / "cfg1" / "config_000.json"),
            "--loads", "8", "--out", str(out),
        )
        assert rc == 0
        obj = read_json(out)
        assert obj["converged"] is True
        assert obj["t_end"] == pytest.approx(16.02, abs=0.05)


class TestStudyTrainEval:
    def test_dataset_round_trips(self, ws):
        ds = load_dataset(str(ws / "ds.csv"))
        assert ds.spec.n_nodes == 2 and ds.spec.n_pop == 5
        assert len(ds.configs) == 3
        assert (ws / "ds.meta.json").exists()

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        out = tmp_path / "again.csv"
        assert run(
            "study", "--spec", str(ws / "study.json"),
            "--workers", "1", "--out", str(out),
        ) == 0
        assert out.read_bytes() == (ws / "ds.csv").read_bytes()

    def test_seed_override_changes_bytes(self, ws, tmp_path):
        out = tmp_path / "seed1.csv"
        assert run(
            "study", "--spec", str(ws / "study.json"),
            "--seed", "1", "--workers", "1", "--out", str(out),
        ) == 0
        assert out.read_bytes() != (ws / "ds.csv").read_bytes()
        assert read_json(tmp_path / "seed1.meta.json")["spec"]["seed"] == 1

    def test_trained_model_shape(self, ws):
        model = load_model(str(ws / "models" / "model_2.json"))
        assert model.k == 3
        assert model.features.shape == (4, 1)  # round(0.7 * 5) rows, drop-last feature

    def test_train_rejects_oversized_k(self, ws, tmp_path):
        rc = run(
            "train", "--dataset", str(ws / "ds.csv"),
            "--k", "10", "--model", str(tmp_path / "m.json"),
        )
        assert rc == 1
        assert not (tmp_path / "m.json").exists()

    def test_eval_report(self, ws, tmp_path):
        out = tmp_path / "report.json"
        rc = run(
            "eval", "--dataset", str(ws / "ds.csv"),
            "--model", str(ws / "models" / "model_2.json"),
            "--k", "1", "--out", str(out),
        )
        assert rc == 0
        obj = read_json(out)
        assert 0.0 <= obj["test_accuracy"] <= 1.0
        assert set(obj) >= {"train_accuracy", "confusion", "gap_mean", "k_sensitivity"}

    def test_predict_stdout_and_file(self, ws, tmp_path, capsys):
        out = tmp_path / "pred.json"
        rc = run(
            "predict", "--model", str(ws / "models" / "model_2.json"),
            "--loads", "12,5", "--out", str(out),
        )
        assert rc == 0
        obj = read_json(out)
        assert obj["n_nodes"] == 2
        assert 0 <= obj["label"] < 3
        assert tuple(obj["parents"]) in {(-1, 1), (2, -1), (-1, -1)}
        assert json.dumps(obj, sort_keys=True) in capsys.readouterr().out


@pytest.fixture(scope="module")
def model3(tmp_path_factory):
    """1-NN with a single stored row: always predicts family index 0."""
    path = tmp_path_factory.mktemp("m3") / "model_3.json"
    model = KnnModel(
        k=1,
        features=np.zeros((1, 2)),
        labels=np.zeros(1, dtype=int),
        spec=FeatureSpec(),
    )
    save_model(model, str(path))
    return str(path)


class TestComposeMerge:
    def test_compose_with_percentile(self, ws, tmp_path):
        spec = ComplexSystemSpec(
            junctions=(),
            groups=(NodeGroup(anchor=TANK, node_ids=(1, 2)),),
            loads={1: 10.0, 2: 6.0},
        )
        system = tmp_path / "system.json"
        system.write_text(json.dumps(spec.to_dict()))
        out = tmp_path / "design.json"
        rc = run(
            "compose", "--system", str(system), "--models", str(ws / "models"),
            "--percentile", "3", "--segments", "8", "--workers", "1",
            "--out", str(out),
        )
        assert rc == 0
        design = read_json(out)
        assert design["n_nodes"] == 2 and len(design["parents"]) == 2
        report = read_json(tmp_path / "design.percentile.json")
        assert report["exhaustive"] is True
        assert report["space_size"] == 3
        assert 0.0 <= report["percentile"] <= 100.0

    def test_compose_without_matching_model(self, ws, tmp_path):
        spec = ComplexSystemSpec(
            junctions=(),
            groups=(NodeGroup(anchor=TANK, node_ids=(1, 2, 3)),),
            loads={1: 5.0, 2: 5.0, 3: 5.0},
        )
        system = tmp_path / "system.json"
        system.write_text(json.dumps(spec.to_dict()))
        rc = run(
            "compose", "--system", str(system), "--models", str(ws / "models"),
            "--out", str(tmp_path / "design.json"),
        )
        assert rc == 1

    def test_invalid_system_load(self, ws, tmp_path):
        obj = {
            "junctions": [],
            "groups": [{"anchor": -1, "node_ids": [1, 2], "loads": [10.0, -3.0]}],
        }
        system = tmp_path / "system.json"
        system.write_text(json.dumps(obj))
        rc = run(
            "compose", "--system", str(system), "--models", str(ws / "models"),
            "--out", str(tmp_path / "design.json"),
        )
        assert rc == 1

    def test_merge_estimate_single(self, model3, tmp_path):
        out = tmp_path / "est.json"
        rc = run(
            "merge-estimate", "--model", model3, "--loads", "10,8,6,4",
            "--segments", "8", "--workers", "1", "--out", str(out),
        )
        assert rc == 0
        obj = read_json(out)
        assert obj["objective"] > 0
        assert obj["regret"] is None
        assert len(obj["candidates"]) == 6

    def test_merge_estimate_batch(self, model3, tmp_path):
        out = tmp_path / "batch.json"
        rc = run(
            "merge-estimate", "--model", model3, "--trials", "1",
            "--segments", "8", "--workers", "1", "--out", str(out),
        )
        assert rc == 0
        obj = read_json(out)
        assert len(obj["trials"]) == 1
        assert "regrets" not in obj  # only with --reference
        loads = obj["trials"][0]["loads"]
        assert loads == sorted(loads, reverse=True)

    def test_merge_estimate_needs_exactly_one_input(self, model3, tmp_path):
        out = str(tmp_path / "x.json")
        assert run("merge-estimate", "--model", model3, "--out", out) == 1
        assert run(
            "merge-estimate", "--model", model3,
            "--loads", "5,5,5,5", "--trials", "2", "--out", out,
        ) == 1


class TestPlotData:
    def test_dataset_kind(self, ws, tmp_path):
        rc = run(
            "plot-data", "--kind", "feature-scatter",
            "--dataset", str(ws / "ds.csv"), "--out", str(tmp_path),
        )
        assert rc == 0
        assert (tmp_path / "feature-scatter.csv").read_text().startswith("D_1,label")
        assert (tmp_path / "feature-scatter.png").stat().st_size > 0

    def test_dataset_kind_requires_dataset(self, tmp_path):
        rc = run(
            "plot-data", "--kind", "success-rate", "--out", str(tmp_path)
        )
        assert rc == 1

    def test_histogram_from_report(self, tmp_path):
        report = tmp_path / "batch.json"
        report.write_text(json.dumps({"regrets": [0.02, 0.11, 0.4]}))
        rc = run(
            "plot-data", "--kind", "regret-histogram",
            "--report", str(report), "--bins", "5", "--out", str(tmp_path),
        )
        assert rc == 0
        text = (tmp_path / "regret-histogram.csv").read_text()
        assert text.splitlines()[0] == "bin_lo,bin_hi,count"
        assert len(text.splitlines()) == 6

    def test_histogram_requires_report_with_regrets(self, tmp_path):
        rc = run(
            "plot-data", "--kind", "regret-histogram", "--out", str(tmp_path)
        )
        assert rc == 1
        report = tmp_path / "noregrets.json"
        report.write_text(json.dumps({"trials": []}))
        rc = run(
            "plot-data", "--kind", "regret-histogram",
            "--report", str(report), "--out", str(tmp_path),
        )
        assert rc == 1

    def test_unknown_kind_rejected_by_click(self, ws, tmp_path):
        rc = run(
            "plot-data", "--kind", "pie",
            "--dataset", str(ws / "ds.csv"), "--out", str(tmp_path),
        )
        assert rc == 1
