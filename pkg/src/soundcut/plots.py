import typing as t
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.ticker  # noqa: E402

from .metrics import FeatureRanking  # noqa: E402
from .neural import EpochRecord  # noqa: E402

# Fixed metadata and hash salt keep SVG output byte-identical across runs.
SVG_METADATA = {"Date": None, "Creator": None}
SVG_RC = {"svg.hashsalt": "soundcut", "svg.fonttype": "none"}


def subplots(n_rows, n_cols, width=8, height=None, **kwargs):
    return plt.subplots(
        n_rows,
        n_cols,
        figsize=(width * n_cols, (height or width) * n_rows),
        dpi=100,
        **kwargs,
    )


def _save_svg(fig, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def draw_ranking(ax, ranking: FeatureRanking, top: t.Optional[int] = None):
    entries = list(ranking.entries[:top] if top else ranking.entries)
    names = [name for name, _ in entries]
    scores = [score for _, score in entries]

    # Best feature on top.
    positions = list(range(len(entries)))[::-1]
    ax.barh(positions, scores, color="C0")
    ax.axvline(0.5, color="C1", linestyle=":", label="chance")
    ax.set_yticks(positions)
    ax.set_yticklabels(names)
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("univariate model AUC")
    ax.legend(loc="lower right")


def save_ranking_svg(ranking: FeatureRanking, path: Path, top: t.Optional[int] = None):
    n_bars = len(ranking.entries[:top] if top else ranking.entries)
    fig, ax = subplots(1, 1, width=8, height=max(2.0, 0.25 * n_bars + 1))
    draw_ranking(ax, ranking, top=top)
    fig.tight_layout()
    _save_svg(fig, path)


def draw_history(axes, history: t.Sequence[EpochRecord], label: str):
    epochs = [r.epoch for r in history]
    axes[0].plot(epochs, [r.loss for r in history], label=label)
    axes[1].plot(epochs, [r.train_auc for r in history], label=label)

    for ax, title in zip(axes, ["loss", "training AUC"]):
        ax.xaxis.set_major_locator(matplotlib.ticker.MaxNLocator(integer=True))
        ax.set_xlabel("epoch")
        ax.set_title(title)
        ax.legend()


def save_history_svg(histories: t.Mapping[str, t.Sequence[EpochRecord]], path: Path):
    fig, axes = subplots(1, 2, width=6, height=4)
    for label, history in histories.items():
        draw_history(axes, history, label)
    fig.tight_layout()
    _save_svg(fig, path)
