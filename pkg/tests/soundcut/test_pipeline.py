import json
import pathlib

import numpy as np
import pandas as pd
import pytest

from soundcut import errors, neural, pipeline, synthehr
from soundcut.pipeline import ExperimentConfig, Stage, StopBaseline


class _SumModel:
    """Scores a row by the sum of its kept columns."""

    def __init__(self, n_inputs):
        self.n_inputs = n_inputs

    def predict(self, X, keep=None):
        keep = np.ones(self.n_inputs) if keep is None else keep
        return np.asarray(X) @ keep


_TWO_DIAGNOSES = (
    synthehr.PlantedCode(synthehr.EventKind.DIAG, 0, 2.0),
    synthehr.PlantedCode(synthehr.EventKind.DIAG, 1, 2.0),
)


def _tiny_config(**changes) -> ExperimentConfig:
    config = ExperimentConfig(
        cohort=synthehr.CohortConfig(
            n_positive=60,
            n_negative=60,
            n_diag=6,
            n_med=3,
            n_lab=2,
            planted=_TWO_DIAGNOSES,
        ),
        train=neural.TrainConfig(batch_size=32, epochs=2),
        hidden=(8, 4),
        n_boot=100,
    )
    return config.replace(**changes).with_seed(7)


class TestExperimentConfig:
    def test_nested_from_dict(self):
        config = ExperimentConfig.from_dict(
            {"cohort": {"n_positive": 5}, "train": {"epochs": 3}, "hidden": [8, 4]}
        )
        assert config.cohort.n_positive == 5
        assert config.train.epochs == 3
        assert config.hidden == (8, 4)

    def test_dict_round_trip(self):
        config = _tiny_config()
        assert ExperimentConfig.from_dict(config.to_dict()) == config

    @pytest.mark.parametrize(
        "data",
        [
            {"train": {"epoch": 3}},
            {"stop_baseline": "sometimes"},
            {"stop_delta": -0.1},
            {"split": {"test_fraction": 1.0}},
        ],
    )
    def test_invalid(self, data):
        with pytest.raises(errors.ConfigError):
            ExperimentConfig.from_dict(data)

    def test_desk_config_is_the_default(self):
        path = pathlib.Path(__file__).parents[2] / "configs" / "desk.json"
        config = ExperimentConfig.from_dict(json.loads(path.read_text()))
        assert config == ExperimentConfig()

    def test_with_seed(self):
        config = ExperimentConfig().with_seed(42)
        assert config.seed == config.cohort.seed == 42
        assert config.train.seed == config.split.seed == 42


class TestSplit:
    def test_stratified_and_disjoint(self):
        labels = np.array([0] * 80 + [1] * 20)
        train, test = pipeline.split(labels, pipeline.SplitConfig(0.25, seed=1))
        assert len(set(train) & set(test)) == 0
        assert sorted([*train, *test]) == list(range(100))
        assert labels[test].sum() == 5

    def test_deterministic(self):
        labels = np.tile([0, 1], 30)
        first = pipeline.split(labels, pipeline.SplitConfig(seed=3))
        second = pipeline.split(labels, pipeline.SplitConfig(seed=3))
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_single_class(self):
        with pytest.raises(errors.SplitError):
            pipeline.split(np.zeros(20), pipeline.SplitConfig())


class TestIterativeRemoval:
    def test_removes_useless_features_lowest_index_first(self):
        labels = np.array([0, 0, 0, 1, 1, 1])
        X = np.column_stack([labels, np.zeros(6), np.zeros(6)]).astype(float)
        survivors, trace = pipeline.iterative_removal(_SumModel(3), X, labels, [0, 1, 2])

        assert list(survivors) == [0]
        assert trace.baseline == 1.0
        assert trace.removed == [1, 2]
        assert all(step.accepted for step in trace.steps)

    def test_crossing_step_is_reverted(self):
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        x0 = np.array([0, 0, 0, 0, 1, 1, 0, 0], dtype=float)
        x1 = np.array([0, 0, 0, 0, 0, 0, 1, 1], dtype=float)
        survivors, trace = pipeline.iterative_removal(
            _SumModel(2), np.column_stack([x0, x1]), labels, [0, 1]
        )
        assert list(survivors) == [0, 1]
        (step,) = trace.steps
        assert (step.feature, step.auc, step.accepted) == (0, 0.75, False)

    def test_generous_delta_keeps_one_feature(self):
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        x0 = np.array([0, 0, 0, 0, 1, 1, 0, 0], dtype=float)
        x1 = np.array([0, 0, 0, 0, 0, 0, 1, 1], dtype=float)
        survivors, _ = pipeline.iterative_removal(
            _SumModel(2), np.column_stack([x0, x1]), labels, [0, 1], stop_delta=0.3
        )
        assert list(survivors) == [1]

    def test_iteration_baseline_moves_with_each_step(self):
        # each of columns 1 and 2 lifts one positive off a tie with every
        # negative, worth 0.05 AUC apiece
        labels = np.array([0] * 10 + [1] * 10)
        X = np.zeros((20, 3))
        X[10:18, 0] = 1.0
        X[18, 1] = 1.0
        X[19, 2] = 1.0
        model = _SumModel(3)

        stage, stage_trace = pipeline.iterative_removal(
            model, X, labels, [0, 1, 2], stop_delta=0.06
        )
        moving, _ = pipeline.iterative_removal(
            model,
            X,
            labels,
            [0, 1, 2],
            stop_delta=0.06,
            stop_baseline=StopBaseline.ITERATION,
        )
        assert list(stage) == [0, 2]
        assert [s.auc for s in stage_trace.steps] == pytest.approx([0.95, 0.9])
        assert list(moving) == [0]

    def test_empty_selection(self):
        with pytest.raises(errors.InvalidSelectionError):
            pipeline.iterative_removal(_SumModel(2), np.zeros((4, 2)), [0, 1, 0, 1], [])

    def test_trace_frame(self):
        trace = pipeline.RemovalTrace(
            baseline=0.9,
            steps=(
                pipeline.RemovalStep(2, 0.91, True),
                pipeline.RemovalStep(0, 0.7, False),
            ),
        )
        frame = trace.to_frame(["a", "b", "c"])
        assert list(frame.feature) == ["c", "a"]
        assert list(frame.accepted) == [True, False]


class TestRetrain:
    def test_empty_selection(self):
        with pytest.raises(errors.InvalidSelectionError):
            pipeline.retrain_final(
                np.zeros((4, 2)), [0, 1, 0, 1], [], neural.TrainConfig()
            )

    def test_reads_only_the_selected_columns(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(80, 4))
        y = (X[:, 2] > 0).astype(int)
        result = pipeline.retrain_final(
            X,
            y,
            [2, 3],
            neural.TrainConfig(batch_size=20, epochs=3),
            hidden=(4, 3),
            holdout=(X, y),
            n_boot=100,
        )
        assert result.model.n_inputs == 2
        assert list(result.columns) == [2, 3]
        assert result.test.n_pos + result.test.n_neg == 80


@pytest.mark.slow
class TestFullExperiment:
    @pytest.fixture(scope="class")
    def report(self):
        return pipeline.full_experiment(_tiny_config())

    def test_stages(self, report):
        assert [s.stage for s in report.stages] == [
            Stage.FULL,
            Stage.BINMASK,
            Stage.REDUCED,
            Stage.FINAL,
        ]
        full, binmask, reduced, final = report.stages
        assert len(full.selected) == len(report.columns)
        assert set(reduced.selected) <= set(binmask.selected)
        assert final.selected == reduced.selected
        for result in report.stages:
            assert 0.0 <= result.test.ci_low <= result.test_auc <= result.test.ci_high

    def test_ranking_covers_the_final_columns(self, report):
        final = report.stage(Stage.FINAL)
        assert sorted(report.ranking.names) == sorted(
            report.columns[i] for i in final.selected
        )

    def test_planted_codes(self, report):
        assert list(report.planted_codes) == ["diag:0", "diag:1"]
        assert len(report.planted_columns) == 2 * len(synthehr.CODE_LETTERS)
        binmask = report.stage(Stage.BINMASK)
        stages = report.stages_frame().set_index("stage")
        assert stages.loc["binmask", "n_planted_codes_selected"] == len(
            report.recovered_codes(binmask.selected)
        )
        assert stages.loc["full", "n_planted_codes_selected"] == 2

    def test_deterministic(self, report):
        again = pipeline.full_experiment(_tiny_config())
        pd.testing.assert_frame_equal(again.stages_frame(), report.stages_frame())
        assert again.ranking == report.ranking

    def test_write(self, report, tmp_path):
        written = report.write(tmp_path)
        names = sorted(p.name for p in written)
        assert names == [
            "features.txt",
            "history.csv",
            "history.svg",
            "ranking.csv",
            "ranking.svg",
            "removal_trace.csv",
            "stages.csv",
        ]
        stages = pd.read_csv(tmp_path / "stages.csv")
        assert list(stages.stage) == ["full", "binmask", "reduced", "final"]

    def test_svg_is_reproducible(self, report, tmp_path):
        report.write(tmp_path / "a")
        report.write(tmp_path / "b")
        for name in ("ranking.svg", "history.svg"):
            first = (tmp_path / "a" / name).read_bytes()
            assert first == (tmp_path / "b" / name).read_bytes()


@pytest.mark.slow
class TestPlantedRecovery:
    """Desk-scale cohort: ten planted codes among 35."""

    @pytest.fixture(scope="class")
    def report(self):
        return pipeline.full_experiment(ExperimentConfig().replace(n_boot=200))

    def test_binmask_keeps_the_planted_codes(self, report):
        binmask = report.stage(Stage.BINMASK)
        assert len(report.planted_codes) == 10
        assert len(report.recovered_codes(binmask.selected)) >= 8
        assert len(binmask.selected) <= 60

    def test_removal_stays_within_delta(self, report):
        trace = report.trace
        accepted = [step.auc for step in trace.steps if step.accepted]
        survivors_auc = accepted[-1] if accepted else trace.baseline
        assert survivors_auc >= trace.baseline - pipeline.STOP_DELTA

    def test_final_auc_close_to_full(self, report):
        full = report.stage(Stage.FULL)
        final = report.stage(Stage.FINAL)
        assert final.test_auc >= full.test_auc - 0.01
