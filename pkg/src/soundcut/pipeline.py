"""Feature selection in stages: a full-feature reference model, BinMask
training, iterative feature removal and retraining on the survivors.
"""
import concurrent.futures
import dataclasses
import enum
import logging
import pathlib
import typing as t

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from . import errors, metrics, neural, plots, synthehr
from .core import ConfigMixin, model
from .generic_structs import IndexSet

logger = logging.getLogger(__name__)

STOP_DELTA = 0.006
FINAL_SEED_OFFSET = 1


class Stage(enum.Enum):
    FULL = "full"
    BINMASK = "binmask"
    REDUCED = "reduced"
    FINAL = "final"


class StopBaseline(enum.Enum):
    """What the removal stop rule compares against: the AUC before the
    removal stage, or the AUC at the start of each iteration.
    """

    STAGE = "stage"
    ITERATION = "iteration"


@model
class SplitConfig(ConfigMixin):
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise errors.ConfigError(
                f"test fraction must be in (0, 1), got {self.test_fraction}"
            )


@model
class ExperimentConfig(ConfigMixin):
    cohort: synthehr.CohortConfig = synthehr.CohortConfig()
    train: neural.TrainConfig = neural.TrainConfig()
    split: SplitConfig = SplitConfig()
    hidden: t.Tuple[int, int] = (64, 20)
    stop_delta: float = STOP_DELTA
    stop_baseline: str = StopBaseline.STAGE.value
    min_code_fraction: float = 0.01
    n_boot: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.stop_delta < 0:
            raise errors.ConfigError("stop delta must be non-negative")
        try:
            StopBaseline(self.stop_baseline)
        except ValueError:
            raise errors.ConfigError(f"unknown stop baseline {self.stop_baseline!r}")
        if not 0 < self.min_code_fraction <= 1:
            raise errors.ConfigError("min code fraction must be in (0, 1]")

    @classmethod
    def _coerce(cls, data):
        nested = {
            "cohort": synthehr.CohortConfig,
            "train": neural.TrainConfig,
            "split": SplitConfig,
        }
        for name, config_cls in nested.items():
            if isinstance(data.get(name), dict):
                data[name] = config_cls.from_dict(data[name])
        return data

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Derives every stage seed from one experiment seed."""
        return self.replace(
            seed=seed,
            cohort=self.cohort.replace(seed=seed),
            train=self.train.replace(seed=seed),
            split=self.split.replace(seed=seed),
        )


@dataclasses.dataclass(frozen=True)
class StageResult:
    """`columns` are the original matrix columns the model reads; `selected`
    is the feature set the stage hands on.
    """

    stage: Stage
    selected: IndexSet
    columns: IndexSet
    train_auc: float
    model: neural.MlpModel
    history: t.Tuple[neural.EpochRecord, ...] = ()
    test: t.Optional[metrics.AucReport] = None

    @property
    def test_auc(self) -> t.Optional[float]:
        return None if self.test is None else self.test.auc


@model
class RemovalStep:
    feature: int
    auc: float
    accepted: bool


@model
class RemovalTrace:
    baseline: float
    steps: t.Tuple[RemovalStep, ...] = ()

    @property
    def removed(self) -> t.List[int]:
        return [s.feature for s in self.steps if s.accepted]

    def to_frame(self, columns: t.Optional[t.Sequence[str]] = None) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "iteration": range(len(self.steps)),
                "feature": [
                    columns[s.feature] if columns else s.feature for s in self.steps
                ],
                "train_auc": [s.auc for s in self.steps],
                "accepted": [s.accepted for s in self.steps],
                "baseline": self.baseline,
            }
        )


def split(labels, split_config: SplitConfig) -> t.Tuple[np.ndarray, np.ndarray]:
    """Stratified, seeded train/test row indices."""
    labels = np.asarray(labels, dtype=int)
    rows = np.arange(labels.size)
    try:
        train_rows, test_rows = train_test_split(
            rows,
            test_size=split_config.test_fraction,
            random_state=split_config.seed,
            stratify=labels,
        )
    except ValueError as e:
        raise errors.SplitError(f"cannot split {labels.size} rows: {e}") from e

    for name, part in (("train", train_rows), ("test", test_rows)):
        if np.unique(labels[part]).size < 2:
            raise errors.SplitError(f"the {name} split holds a single class")
    return np.sort(train_rows), np.sort(test_rows)


Holdout = t.Tuple[t.Any, np.ndarray]


def _test_report(
    mlp: neural.MlpModel,
    holdout: t.Optional[Holdout],
    n_boot: int,
    seed: int,
    columns: t.Optional[IndexSet] = None,
    keep: t.Optional[np.ndarray] = None,
) -> t.Optional[metrics.AucReport]:
    if holdout is None:
        return None
    X, y = holdout
    if columns is not None:
        X = X[:, columns.as_array()]
    return metrics.auc_report(mlp.predict(X, keep=keep), y, n_boot=n_boot, seed=seed)


def _trained(
    X,
    labels,
    train_config: neural.TrainConfig,
    hidden: t.Tuple[int, int],
    seed: int,
    minibatch_refresh: t.Optional[neural.MinibatchRefresh],
) -> t.Tuple[neural.MlpModel, t.List[neural.EpochRecord]]:
    mlp_config = neural.MlpConfig(n_inputs=X.shape[1], hidden=hidden, seed=seed)
    init = neural.init_model(mlp_config, X)
    return neural.train(
        init,
        neural.Dataset(X, labels),
        train_config.replace(seed=seed),
        minibatch_refresh=minibatch_refresh,
    )


def run_full_stage(
    matrix,
    labels,
    train_config: neural.TrainConfig,
    hidden: t.Tuple[int, int] = (64, 20),
    minibatch_refresh: t.Optional[neural.MinibatchRefresh] = None,
    holdout: t.Optional[Holdout] = None,
    n_boot: int = 1000,
) -> StageResult:
    """Reference model on every feature with the input mask frozen open."""
    train_config = train_config.replace(train_input_mask=False)
    mlp, history = _trained(
        matrix, labels, train_config, hidden, train_config.seed, minibatch_refresh
    )
    everything = IndexSet.full(matrix.shape[1])
    return StageResult(
        stage=Stage.FULL,
        selected=everything,
        columns=everything,
        train_auc=metrics.auc(mlp.predict(matrix), labels),
        model=mlp,
        history=tuple(history),
        test=_test_report(mlp, holdout, n_boot, train_config.seed),
    )


def run_binmask_stage(
    matrix,
    labels,
    train_config: neural.TrainConfig,
    hidden: t.Tuple[int, int] = (64, 20),
    minibatch_refresh: t.Optional[neural.MinibatchRefresh] = None,
    holdout: t.Optional[Holdout] = None,
    n_boot: int = 1000,
) -> StageResult:
    """Trains with the L0-penalized input mask and keeps the features whose
    smoothed mask reaches 0.5.
    """
    train_config = train_config.replace(train_input_mask=True)
    mlp, history = _trained(
        matrix, labels, train_config, hidden, train_config.seed, minibatch_refresh
    )
    selected = neural.binmask_select(mlp)
    keep = selected.mask(matrix.shape[1])
    logger.info("BinMask selected %d of %d features", len(selected), matrix.shape[1])
    return StageResult(
        stage=Stage.BINMASK,
        selected=selected,
        columns=IndexSet.full(matrix.shape[1]),
        train_auc=metrics.auc(mlp.predict(matrix, keep=keep), labels),
        model=mlp,
        history=tuple(history),
        test=_test_report(mlp, holdout, n_boot, train_config.seed, keep=keep),
    )


def iterative_removal(
    mlp: neural.MlpModel,
    matrix,
    labels,
    selected: t.Iterable[int],
    stop_delta: float = STOP_DELTA,
    stop_baseline: StopBaseline = StopBaseline.STAGE,
    threads: int = 1,
    show_progress: bool = False,
) -> t.Tuple[IndexSet, RemovalTrace]:
    """Greedily removes the feature whose zeroing costs the least training
    AUC, until the AUC would fall more than `stop_delta` below the baseline.
    The removal that crosses the threshold is recorded and reverted.
    """
    current = IndexSet(selected)
    if not current:
        raise errors.InvalidSelectionError(
            "iterative removal needs a non-empty selection"
        )
    n = mlp.n_inputs

    def _auc_without(feature: t.Optional[int]) -> float:
        kept = current if feature is None else current.without(feature)
        return metrics.auc(mlp.predict(matrix, keep=kept.mask(n)), labels)

    stage_baseline = _auc_without(None)
    reference = stage_baseline
    steps = []

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        progress = tqdm(
            total=len(current) - 1, desc="removal", disable=not show_progress
        )
        while len(current) > 1:
            candidates = list(current)
            scores = list(pool.map(_auc_without, candidates))
            # max keeps the first maximum, which is the lowest index
            best = max(range(len(candidates)), key=scores.__getitem__)
            feature, score = candidates[best], scores[best]

            if score < reference - stop_delta:
                steps.append(RemovalStep(feature, score, accepted=False))
                logger.debug("Stopping: removing %d gives AUC %.5f", feature, score)
                break

            steps.append(RemovalStep(feature, score, accepted=True))
            current = current.without(feature)
            if stop_baseline == StopBaseline.ITERATION:
                reference = score
            progress.update()
        progress.close()

    logger.info(
        "Iterative removal kept %d features (baseline AUC %.4f)",
        len(current),
        stage_baseline,
    )
    return current, RemovalTrace(baseline=stage_baseline, steps=tuple(steps))


def retrain_final(
    matrix,
    labels,
    selected: t.Iterable[int],
    train_config: neural.TrainConfig,
    hidden: t.Tuple[int, int] = (64, 20),
    minibatch_refresh: t.Optional[neural.MinibatchRefresh] = None,
    holdout: t.Optional[Holdout] = None,
    n_boot: int = 1000,
) -> StageResult:
    """A fresh model on the selected columns only."""
    selected = IndexSet(selected)
    if not selected:
        raise errors.InvalidSelectionError("cannot retrain on an empty feature set")

    X = matrix[:, selected.as_array()]
    seed = train_config.seed + FINAL_SEED_OFFSET
    train_config = train_config.replace(train_input_mask=False)
    mlp, history = _trained(X, labels, train_config, hidden, seed, minibatch_refresh)
    return StageResult(
        stage=Stage.FINAL,
        selected=selected,
        columns=selected,
        train_auc=metrics.auc(mlp.predict(X), labels),
        model=mlp,
        history=tuple(history),
        test=_test_report(mlp, holdout, n_boot, seed, columns=selected),
    )


# ------- experiments ---------


@dataclasses.dataclass(frozen=True)
class ExperimentReport:
    config: ExperimentConfig
    columns: t.Tuple[str, ...]
    stages: t.Tuple[StageResult, ...]
    trace: RemovalTrace
    ranking: metrics.FeatureRanking
    planted_codes: t.Mapping[str, IndexSet]

    def stage(self, stage: Stage) -> StageResult:
        return next(s for s in self.stages if s.stage == stage)

    @property
    def planted_columns(self) -> IndexSet:
        return IndexSet(i for columns in self.planted_codes.values() for i in columns)

    def recovered_codes(self, selected: IndexSet) -> t.List[str]:
        """Planted codes with at least one column in `selected`."""
        return [
            name for name, columns in self.planted_codes.items() if columns & selected
        ]

    def stages_frame(self) -> pd.DataFrame:
        rows = []
        for result in self.stages:
            test = result.test
            rows.append(
                {
                    "stage": result.stage.value,
                    "n_selected": len(result.selected),
                    "n_planted_selected": len(result.selected & self.planted_columns),
                    "n_planted_codes_selected": len(
                        self.recovered_codes(result.selected)
                    ),
                    "train_auc": result.train_auc,
                    "test_auc": None if test is None else test.auc,
                    "ci_low": None if test is None else test.ci_low,
                    "ci_high": None if test is None else test.ci_high,
                    "test": None if test is None else test.format(),
                }
            )
        return pd.DataFrame(rows)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "stage": result.stage.value,
                    "epoch": record.epoch,
                    "loss": record.loss,
                    "train_auc": record.train_auc,
                }
                for result in self.stages
                for record in result.history
            ],
            columns=["stage", "epoch", "loss", "train_auc"],
        )

    def ranking_frame(self) -> pd.DataFrame:
        final = self.stage(Stage.FINAL)
        return self.ranking.to_frame({self.columns[i] for i in final.selected})

    def write(self, out_dir: pathlib.Path) -> t.List[pathlib.Path]:
        """Writes the report files and returns their paths."""
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        frames = {
            "stages.csv": self.stages_frame(),
            "removal_trace.csv": self.trace.to_frame(self.columns),
            "ranking.csv": self.ranking_frame(),
            "history.csv": self.history_frame(),
        }
        written = []
        for name, frame in frames.items():
            path = out_dir / name
            frame.to_csv(path, index=False, lineterminator="\n")
            written.append(path)

        features_path = out_dir / "features.txt"
        final = self.stage(Stage.FINAL)
        features_path.write_text("".join(f"{self.columns[i]}\n" for i in final.selected))
        written.append(features_path)

        svg_path = out_dir / "ranking.svg"
        plots.save_ranking_svg(self.ranking, svg_path)
        written.append(svg_path)

        history_path = out_dir / "history.svg"
        plots.save_history_svg(
            {s.stage.value: s.history for s in self.stages if s.history}, history_path
        )
        written.append(history_path)
        return written


def prepare_data(config: ExperimentConfig):
    """Cohort, split, vocabulary and fixed-cutoff matrices for an experiment."""
    cohort = synthehr.generate_cohort(config.cohort)
    cohort = cohort.subset(synthehr.quality_filter(cohort.patients))

    train_rows, test_rows = split(cohort.labels, config.split)
    train_cohort = cohort.take(train_rows)
    test_cohort = cohort.take(test_rows)

    vocabulary = synthehr.filter_codes(train_cohort, config.min_code_fraction)
    layout = synthehr.FeatureLayout.from_vocabulary(vocabulary)

    rng = np.random.default_rng(config.seed)
    pool = synthehr.positive_cutoff_pool(train_cohort, rng)
    window = config.cohort.window_days
    train_matrix = synthehr.build_matrix(
        train_cohort, synthehr.sample_cutoffs(train_cohort, pool, rng, window), layout
    )
    test_matrix = synthehr.build_matrix(
        test_cohort, synthehr.sample_cutoffs(test_cohort, pool, rng, window), layout
    )
    refresher = synthehr.CutoffRefresher(train_cohort, layout, pool, window)
    return train_cohort, test_cohort, layout, train_matrix, test_matrix, refresher


def full_experiment(
    config: ExperimentConfig,
    threads: int = 1,
) -> ExperimentReport:
    train_cohort, test_cohort, layout, train_matrix, test_matrix, refresher = (
        prepare_data(config)
    )
    logger.info(
        "Training on %d patients, testing on %d, %d features (density %.3f)",
        len(train_cohort),
        len(test_cohort),
        train_matrix.shape[1],
        train_matrix.density,
    )

    X, y = train_matrix.matrix, train_cohort.label_array
    holdout = (test_matrix.matrix, test_cohort.label_array)
    train_config = config.train
    refresh = refresher if train_config.resample_cutoffs else None
    common = dict(hidden=config.hidden, holdout=holdout, n_boot=config.n_boot)

    full = run_full_stage(X, y, train_config, minibatch_refresh=refresh, **common)
    binmask = run_binmask_stage(X, y, train_config, minibatch_refresh=refresh, **common)

    survivors, trace = iterative_removal(
        binmask.model,
        X,
        y,
        binmask.selected,
        stop_delta=config.stop_delta,
        stop_baseline=StopBaseline(config.stop_baseline),
        threads=threads,
        show_progress=train_config.show_progress,
    )
    keep = survivors.mask(X.shape[1])
    reduced = StageResult(
        stage=Stage.REDUCED,
        selected=survivors,
        columns=binmask.columns,
        train_auc=metrics.auc(binmask.model.predict(X, keep=keep), y),
        model=binmask.model,
        test=_test_report(
            binmask.model, holdout, config.n_boot, train_config.seed, keep=keep
        ),
    )

    final = retrain_final(
        X,
        y,
        survivors,
        train_config,
        minibatch_refresh=refresher.restricted(survivors) if refresh else None,
        **common,
    )

    final_X = test_matrix.select(survivors)
    ranking = metrics.univariate_model_auc(
        final.model,
        final_X.matrix,
        test_cohort.label_array,
        columns=final_X.columns,
        threads=threads,
    )

    return ExperimentReport(
        config=config,
        columns=tuple(layout.columns),
        stages=(full, binmask, reduced, final),
        trace=trace,
        ranking=ranking,
        planted_codes={
            synthehr.code_name(code): layout.columns_of([code])
            for code in sorted(train_cohort.ground_truth, key=synthehr.code_sort_key)
        },
    )
