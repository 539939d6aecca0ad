"""AUC estimation, bootstrap confidence intervals and the univariate-model-AUC
feature ranking.
"""
import concurrent.futures
import logging
import typing as t

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from . import errors
from .core import model

logger = logging.getLogger(__name__)


def _binary_problem(scores, labels) -> t.Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise errors.ValidationError(
            f"{scores.size} scores for {labels.size} labels"
        )
    if not np.isin(labels, (0, 1)).all():
        raise errors.ValidationError("labels must be 0 or 1")

    positive = labels == 1
    if positive.all() or not positive.any():
        raise errors.UndefinedAucError("AUC needs both classes")
    return scores, positive


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counted as one half. Mann-Whitney statistic on average ranks.
    """
    scores, positive = _binary_problem(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos

    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float:
    """O(n^2) concordance count over all positive/negative pairs."""
    scores, positive = _binary_problem(scores, labels)
    diff = scores[positive][:, None] - scores[~positive][None, :]
    concordant = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(concordant / diff.size)


def bootstrap_aucs(scores, labels, n_boot: int = 1000, seed: int = 0) -> np.ndarray:
    """AUC replicates over resamples drawn within each class, so every
    replicate holds both classes.
    """
    scores, positive = _binary_problem(scores, labels)
    if n_boot < 100:
        raise errors.ValidationError(f"n_boot must be at least 100, got {n_boot}")

    rng = np.random.default_rng(seed)
    pos_scores = scores[positive]
    neg_scores = scores[~positive]
    boot_labels = np.concatenate(
        [np.ones(pos_scores.size, dtype=int), np.zeros(neg_scores.size, dtype=int)]
    )

    replicates = np.empty(n_boot)
    for boot_i in range(n_boot):
        resampled = np.concatenate(
            [
                rng.choice(pos_scores, size=pos_scores.size, replace=True),
                rng.choice(neg_scores, size=neg_scores.size, replace=True),
            ]
        )
        replicates[boot_i] = auc(resampled, boot_labels)
    return replicates


def bootstrap_ci(
    scores,
    labels,
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> t.Tuple[float, float]:
    """Percentile interval of the stratified bootstrap AUC distribution. The
    interval always contains the point estimate.
    """
    if not 0 < level < 1:
        raise errors.ValidationError(f"level must be in (0, 1), got {level}")

    point = auc(scores, labels)
    replicates = bootstrap_aucs(scores, labels, n_boot=n_boot, seed=seed)
    alpha = (1 - level) / 2
    low, high = np.quantile(replicates, [alpha, 1 - alpha])

    low = float(np.clip(min(low, point), 0.0, 1.0))
    high = float(np.clip(max(high, point), 0.0, 1.0))
    return low, high


@model
class AucReport:
    auc: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int
    seed: int
    level: float = 0.95

    def format(self) -> str:
        return (
            f"{self.auc:.3f} ({self.level:.0%} CI: "
            f"{self.ci_low:.3f} to {self.ci_high:.3f})"
        )


def auc_report(
    scores,
    labels,
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> AucReport:
    _, positive = _binary_problem(scores, labels)
    low, high = bootstrap_ci(scores, labels, n_boot=n_boot, level=level, seed=seed)
    return AucReport(
        auc=auc(scores, labels),
        ci_low=low,
        ci_high=high,
        n_pos=int(positive.sum()),
        n_neg=int((~positive).sum()),
        seed=seed,
        level=level,
    )


class Predictor(t.Protocol):
    n_inputs: int

    def predict(self, X, keep: t.Optional[np.ndarray] = None) -> np.ndarray:
        ...


@model
class FeatureRanking:
    """Features sorted by descending univariate model AUC, ties by name."""

    entries: t.Tuple[t.Tuple[str, float], ...]

    @property
    def names(self) -> t.List[str]:
        return [name for name, _ in self.entries]

    def to_frame(self, selected: t.Optional[t.Collection[str]] = None) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "feature": self.names,
                "univariate_auc": [score for _, score in self.entries],
                "stage_selected": [
                    selected is None or name in selected for name in self.names
                ],
            }
        )


def univariate_model_auc(
    model: Predictor,
    X,
    labels,
    columns: t.Optional[t.Sequence[str]] = None,
    threads: int = 1,
) -> FeatureRanking:
    """Scores `X` through the full model once per feature, keeping that
    feature's values and zeroing every other column.
    """
    n = model.n_inputs
    if X.shape[1] != n:
        raise errors.ValidationError(f"model reads {n} columns, matrix has {X.shape[1]}")
    if columns is None:
        columns = [f"x{i}" for i in range(n)]
    if len(columns) != n:
        raise errors.ValidationError(f"{len(columns)} names for {n} columns")

    # Raises early on a single-class test set.
    _binary_problem(np.zeros(len(labels)), labels)

    def _isolated_auc(i: int) -> float:
        keep = np.zeros(n)
        keep[i] = 1.0
        return auc(model.predict(X, keep=keep), labels)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        scores = list(pool.map(_isolated_auc, range(n)))

    ranked = sorted(zip(columns, scores), key=lambda entry: (-entry[1], entry[0]))
    logger.debug("Ranked %d features, best %s", n, ranked[0] if ranked else None)
    return FeatureRanking(tuple((name, float(score)) for name, score in ranked))
