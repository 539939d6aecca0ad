import hashlib
import json

import pandas as pd
import pytest

from soundcut import cli, common_graphs, io
from soundcut.trees import tree_to_graph

CONFIG = {
    "cohort": {
        "n_positive": 50,
        "n_negative": 50,
        "n_diag": 6,
        "n_med": 3,
        "n_lab": 2,
        "planted": [
            {"kind": "diag", "code": 0, "hazard": 2.0},
            {"kind": "diag", "code": 1, "hazard": 2.0},
        ],
    },
    "train": {"batch_size": 32, "epochs": 2},
    "hidden": [8, 4],
    "n_boot": 100,
}


def _sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "config.json").write_text(json.dumps(CONFIG))
    code = cli.main(
        [
            "gen",
            "--config", str(root / "config.json"),
            "--seed", "3",
            "--out-matrix", str(root / "data" / "m.mtx"),
            "--out-cohort", str(root / "data" / "cohort.jsonl"),
        ]
    )
    assert code == 0
    return root


def _common(workdir, *args):
    return [*args, "--config", str(workdir / "config.json")]


class TestGen:
    def test_outputs_and_manifest(self, workdir):
        data = workdir / "data"
        for name in ("m.mtx", "m.mtx.columns", "m.mtx.labels", "cohort.jsonl"):
            assert (data / name).exists()
        assert (data / "cohort.jsonl.truth").read_text() == "diag:0\ndiag:1\n"

        manifest = json.loads((data / "m.mtx.manifest.json").read_text())
        assert manifest["subcommand"] == "gen"
        assert manifest["seeds"]["cohort"] == 3
        assert manifest["wall_clock_s"] is None
        assert manifest["outputs"][str(data / "m.mtx")] == _sha256(data / "m.mtx")

    def test_reproducible(self, workdir, tmp_path):
        argv = [
            "gen",
            "--config", str(workdir / "config.json"),
            "--seed", "3",
            "--out-matrix", str(tmp_path / "m.mtx"),
        ]
        assert cli.main(argv) == 0
        expected = (workdir / "data" / "m.mtx").read_bytes()
        assert (tmp_path / "m.mtx").read_bytes() == expected

    def test_timing(self, workdir, tmp_path):
        argv = _common(
            workdir, "gen", "--seed", "3", "--timing",
            "--out-matrix", str(tmp_path / "m.mtx"),
        )
        assert cli.main(argv) == 0
        manifest = json.loads((tmp_path / "m.mtx.manifest.json").read_text())
        assert manifest["wall_clock_s"] >= 0.0


class TestStages:
    def test_select_reduce_retrain_report(self, workdir, capsys):
        data = str(workdir / "data" / "m.mtx")
        out = workdir / "stages"

        assert cli.main(
            _common(
                workdir, "select", "--seed", "3", "--data", data,
                "--out", str(out / "selected.txt"),
                "--model-out", str(out / "binmask.json"),
            )
        ) == 0
        selected = (out / "selected.txt").read_text().split()
        assert selected

        assert cli.main(
            _common(
                workdir, "reduce", "--data", data,
                "--model", str(out / "binmask.json"),
                "--features", str(out / "selected.txt"),
                "--out", str(out / "reduced.txt"),
                "--trace", str(out / "trace.csv"),
            )
        ) == 0
        reduced = (out / "reduced.txt").read_text().split()
        assert set(reduced) <= set(selected)
        trace = pd.read_csv(out / "trace.csv")
        assert list(trace.columns) == [
            "iteration", "feature", "train_auc", "accepted", "baseline"
        ]

        assert cli.main(
            _common(
                workdir, "retrain", "--seed", "3", "--data", data,
                "--features", str(out / "reduced.txt"),
                "--test", data,
                "--out", str(out / "final.json"),
            )
        ) == 0
        final = io.read_model(out / "final.json")
        assert final.n_inputs == len(reduced)

        capsys.readouterr()
        assert cli.main(
            [
                "report",
                "--model", str(out / "final.json"),
                "--data", data,
                "--features", str(out / "reduced.txt"),
                "--svg", str(out / "ranking.svg"),
            ]
        ) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "feature,univariate_auc,stage_selected"
        assert sorted(line.split(",")[0] for line in lines[1:]) == sorted(reduced)
        assert (out / "ranking.svg.manifest.json").exists()

    def test_train_prints_history(self, workdir, tmp_path, capsys):
        argv = _common(
            workdir, "train", "--seed", "1", "--epochs", "3",
            "--data", str(workdir / "data" / "m.mtx"),
            "--out", str(tmp_path / "model.json"),
        )
        assert cli.main(argv) == 0
        history = capsys.readouterr().out.splitlines()
        assert history[0] == "epoch,loss,train_auc"
        assert len(history) == 4
        manifest = json.loads((tmp_path / "model.json.manifest.json").read_text())
        assert manifest["config"]["train"]["epochs"] == 3


class TestAxioms:
    def test_demo(self, capsys):
        assert cli.main(["axioms", "--steps", "64"]) == 0
        out = capsys.readouterr().out
        assert "attribution = (2, -1)" in out
        assert "attribution = (0, 1)" in out

    def test_sweep_random_networks(self, tmp_path, capsys):
        argv = [
            "axioms", "--random-mlps", "2", "--pairs", "2", "--seed", "5",
            "--steps", "256", "--out", str(tmp_path / "sweep.csv"),
        ]
        assert cli.main(argv) == 0
        sweep = pd.read_csv(tmp_path / "sweep.csv")
        assert set(sweep.function) == {"random-0", "random-1"}
        assert (tmp_path / "sweep.csv.manifest.json").exists()

    def test_sweep_needs_a_seed(self):
        assert cli.main(["axioms", "--random-mlps", "1"]) == 1


class TestExplain:
    def test_tree(self, tmp_path, capsys):
        graph, cut = tree_to_graph(common_graphs.small_tree())
        path = tmp_path / "tree.json"
        path.write_text(io.dumps_graph(graph, cut))

        capsys.readouterr()
        assert cli.main(["explain", "--graph", str(path), "--input", "[0.1, 5.0]"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["sound"] is True
        assert result["output"] == pytest.approx(0.4)
        assert result["explanation"] == {"node2": 0.0, "node3": 1.0, "node4": 0.0}

    def test_malformed_graph(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        assert cli.main(["explain", "--graph", str(path), "--input", "[0]"]) == 2

    def test_wrong_arity(self, tmp_path):
        path = tmp_path / "diamond.json"
        path.write_text(io.dumps_graph(common_graphs.diamond()))
        assert cli.main(["explain", "--graph", str(path), "--input", "[1]"]) == 1


class TestErrors:
    def test_missing_seed(self, workdir, tmp_path):
        argv = _common(
            workdir, "train",
            "--data", str(workdir / "data" / "m.mtx"),
            "--out", str(tmp_path / "model.json"),
        )
        assert cli.main(argv) == 1
        assert not (tmp_path / "model.json").exists()

    def test_unknown_subcommand(self, capsys):
        assert cli.main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_input_file(self, tmp_path):
        argv = [
            "train", "--seed", "1",
            "--data", str(tmp_path / "absent.mtx"),
            "--out", str(tmp_path / "model.json"),
        ]
        assert cli.main(argv) == 2

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"epochs": 3}')
        assert cli.main(["axioms", "--config", str(path)]) == 1

    def test_print_config(self, workdir, capsys):
        capsys.readouterr()
        argv = _common(workdir, "experiment", "--print-config", "--out", "x")
        assert cli.main(argv) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["hidden"] == [8, 4]
        assert printed["cohort"]["n_positive"] == 50


@pytest.mark.slow
def test_experiment(workdir, tmp_path):
    out = tmp_path / "report"
    argv = _common(workdir, "experiment", "--seed", "2", "--out", str(out))
    assert cli.main(argv) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "experiment"
    assert str(out / "stages.csv") in manifest["outputs"]
    assert (out / "history.svg").exists()
