"""Command-line entry point.

Every subcommand reads the experiment config (`--config`, defaults
otherwise), applies flag overrides and writes a run manifest next to its
outputs. Results meant for machines go to stdout; logging goes to stderr.
"""
import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
import typing as t
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, attribution, compgraph, errors, graph_gen, io, metrics
from . import neural, pipeline, plots, synthehr
from .core import model
from .generic_structs import IndexSet

logger = logging.getLogger(__name__)

# Subcommands whose results depend on random draws.
SEEDED = {"gen", "train", "select", "retrain", "experiment"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@model
class RunManifest:
    tool_version: str
    subcommand: str
    config: t.Mapping[str, t.Any]
    seeds: t.Mapping[str, int]
    inputs: t.Mapping[str, str]
    outputs: t.Mapping[str, str]
    wall_clock_s: t.Optional[float] = None

    def dumps(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclasses.dataclass
class _Run:
    inputs: t.List[Path] = dataclasses.field(default_factory=list)
    outputs: t.List[Path] = dataclasses.field(default_factory=list)
    manifest_path: t.Optional[Path] = None


# ------- config ---------


def _load_config(args) -> pipeline.ExperimentConfig:
    if args.config is not None:
        with open(args.config) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise errors.FormatError(f"{args.config}: malformed JSON: {e}") from e
        config = pipeline.ExperimentConfig.from_dict(data)
    else:
        config = pipeline.ExperimentConfig()

    if args.seed is not None:
        config = config.with_seed(args.seed)

    train_overrides = {
        "epochs": getattr(args, "epochs", None),
        "learning_rate": getattr(args, "lr", None),
        "lambda_mask": getattr(args, "lambda_mask", None),
        "lambda_weight": getattr(args, "lambda_weight", None),
    }
    train_overrides = {k: v for k, v in train_overrides.items() if v is not None}
    if args.progress:
        train_overrides["show_progress"] = True
    if train_overrides:
        config = config.replace(train=config.train.replace(**train_overrides))

    overrides = {
        "stop_delta": getattr(args, "stop_delta", None),
        "stop_baseline": getattr(args, "stop_baseline", None),
        "n_boot": getattr(args, "n_boot", None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "hidden", None):
        overrides["hidden"] = tuple(args.hidden)
    if overrides:
        config = config.replace(**overrides)
    return config


def _seeds(config: pipeline.ExperimentConfig) -> t.Dict[str, int]:
    return {
        "experiment": config.seed,
        "cohort": config.cohort.seed,
        "train": config.train.seed,
        "split": config.split.seed,
    }


def _read_data(path: Path):
    fm = io.read_feature_matrix(path)
    labels = io.read_labels(path)
    if labels.size != fm.shape[0]:
        raise errors.FormatError(f"{labels.size} labels for {fm.shape[0]} rows")
    return fm, labels


def _read_features(path: t.Optional[Path], columns, run: _Run) -> t.Optional[IndexSet]:
    if path is None:
        return None
    run.inputs.append(path)
    return io.parse_feature_set(Path(path).read_text(), columns)


def _write_text(path: Path, text: str, run: _Run):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    run.outputs.append(path)


def _manifest_next_to(path: Path) -> Path:
    return Path(f"{path}.manifest.json")


def _print_csv(frame):
    sys.stdout.write(frame.to_csv(index=False, lineterminator="\n"))


# ------- subcommands ---------


def _cmd_gen(args, config: pipeline.ExperimentConfig, run: _Run):
    cohort = synthehr.generate_cohort(config.cohort)
    cohort = cohort.subset(synthehr.quality_filter(cohort.patients))
    vocabulary = synthehr.filter_codes(cohort, config.min_code_fraction)
    layout = synthehr.FeatureLayout.from_vocabulary(vocabulary)

    rng = np.random.default_rng(config.seed)
    pool = synthehr.positive_cutoff_pool(cohort, rng)
    cutoffs = synthehr.sample_cutoffs(cohort, pool, rng, config.cohort.window_days)
    fm = synthehr.build_matrix(cohort, cutoffs, layout)

    if args.out_cohort:
        path = Path(args.out_cohort)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            io.dump_cohort(cohort, f)
        _write_text(Path(f"{path}.truth"), io.dumps_codes(cohort.ground_truth), run)
        run.outputs.insert(0, path)

    matrix_path = Path(args.out_matrix)
    matrix_path.parent.mkdir(parents=True, exist_ok=True)
    io.save_feature_matrix(fm, matrix_path, cohort.label_array)
    run.outputs += [
        matrix_path, io.columns_path(matrix_path), io.labels_path(matrix_path)
    ]
    run.manifest_path = _manifest_next_to(matrix_path)

    planted = layout.columns_of(cohort.ground_truth)
    logger.info(
        "Wrote %d x %d matrix, density %.4f, %d planted columns",
        *fm.shape,
        fm.density,
        len(planted),
    )


def _train_model(
    config: pipeline.ExperimentConfig, X, y
) -> t.Tuple[neural.MlpModel, list]:
    mlp_config = neural.MlpConfig(
        n_inputs=X.shape[1], hidden=config.hidden, seed=config.train.seed
    )
    return neural.train(
        neural.init_model(mlp_config, X), neural.Dataset(X, y), config.train
    )


def _cmd_train(args, config, run: _Run):
    fm, y = _read_data(args.data)
    run.inputs.append(Path(args.data))
    mlp, history = _train_model(config, fm.matrix, y)

    io.save_model(mlp, args.out)
    run.outputs.append(Path(args.out))
    run.manifest_path = _manifest_next_to(args.out)
    _print_csv(pd.DataFrame([dataclasses.asdict(r) for r in history]))


def _cmd_select(args, config, run: _Run):
    fm, y = _read_data(args.data)
    run.inputs.append(Path(args.data))
    result = pipeline.run_binmask_stage(fm.matrix, y, config.train, hidden=config.hidden)

    _write_text(args.out, io.dumps_feature_set(result.selected, fm.columns), run)
    run.manifest_path = _manifest_next_to(args.out)
    if args.model_out:
        io.save_model(result.model, args.model_out)
        run.outputs.append(Path(args.model_out))
    sys.stdout.write(
        f"selected,train_auc\n{len(result.selected)},{result.train_auc!r}\n"
    )


def _cmd_reduce(args, config, run: _Run):
    fm, y = _read_data(args.data)
    mlp = io.read_model(args.model)
    run.inputs += [Path(args.data), Path(args.model)]

    selected = _read_features(args.features, fm.columns, run)
    if selected is None:
        selected = neural.binmask_select(mlp)

    survivors, trace = pipeline.iterative_removal(
        mlp,
        fm.matrix,
        y,
        selected,
        stop_delta=config.stop_delta,
        stop_baseline=pipeline.StopBaseline(config.stop_baseline),
        threads=args.threads,
        show_progress=config.train.show_progress,
    )
    _write_text(args.out, io.dumps_feature_set(survivors, fm.columns), run)
    run.manifest_path = _manifest_next_to(args.out)
    if args.trace:
        _write_text(
            args.trace,
            trace.to_frame(fm.columns).to_csv(index=False, lineterminator="\n"),
            run,
        )
    _print_csv(trace.to_frame(fm.columns))


def _cmd_retrain(args, config, run: _Run):
    fm, y = _read_data(args.data)
    run.inputs.append(Path(args.data))
    selected = _read_features(args.features, fm.columns, run)

    holdout = None
    if args.test:
        test_fm, test_y = _read_data(args.test)
        run.inputs.append(Path(args.test))
        if test_fm.columns != fm.columns:
            raise errors.ValidationError(
                "train and test matrices have different columns"
            )
        holdout = (test_fm.matrix, test_y)

    result = pipeline.retrain_final(
        fm.matrix,
        y,
        selected,
        config.train,
        hidden=config.hidden,
        holdout=holdout,
        n_boot=config.n_boot,
    )
    io.save_model(result.model, args.out)
    run.outputs.append(Path(args.out))
    run.manifest_path = _manifest_next_to(args.out)

    test = "" if result.test is None else result.test.format()
    sys.stdout.write(
        f"n_features,train_auc,test\n{len(selected)},{result.train_auc!r},{test}\n"
    )


def _cmd_experiment(args, config, run: _Run):
    report = pipeline.full_experiment(config, threads=args.threads)
    out_dir = Path(args.out)
    run.outputs += report.write(out_dir)
    run.manifest_path = out_dir / "manifest.json"
    _print_csv(report.stages_frame())


def _cmd_report(args, config, run: _Run):
    fm, y = _read_data(args.data)
    mlp = io.read_model(args.model)
    run.inputs += [Path(args.data), Path(args.model)]

    columns = _read_features(args.features, fm.columns, run)
    if columns is not None:
        fm = fm.select(columns)
    ranking = metrics.univariate_model_auc(
        mlp, fm.matrix, y, columns=fm.columns, threads=args.threads
    )

    selected = None
    if args.selected:
        selected = set(Path(args.selected).read_text().split())
        run.inputs.append(Path(args.selected))
    frame = ranking.to_frame(selected)

    if args.out:
        _write_text(args.out, frame.to_csv(index=False, lineterminator="\n"), run)
        run.manifest_path = _manifest_next_to(args.out)
    else:
        _print_csv(frame)
    if args.svg:
        plots.save_ranking_svg(ranking, args.svg)
        run.outputs.append(Path(args.svg))
        run.manifest_path = run.manifest_path or _manifest_next_to(args.svg)


def _cmd_axioms(args, config, run: _Run):
    sys.stdout.write(attribution.impossibility_demo(steps=args.steps).render())

    fns = {}
    if args.model:
        run.inputs.append(Path(args.model))
        fns[Path(args.model).name] = neural.MlpFn(io.read_model(args.model))
    if args.random_mlps:
        if args.seed is None:
            raise errors.ValidationError("--random-mlps needs --seed")
        rng = np.random.default_rng(args.seed)
        for k in range(args.random_mlps):
            fns[f"random-{k}"] = neural.MlpFn(graph_gen.random_mlp(rng))
    if not fns:
        return

    sweep = attribution.sweep_axioms(
        fns, n_pairs=args.pairs, seed=args.seed or 0, steps=args.steps
    )
    if args.out:
        _write_text(args.out, sweep.to_csv(index=False, lineterminator="\n"), run)
        run.manifest_path = _manifest_next_to(args.out)
    else:
        sys.stdout.write("\n")
        _print_csv(sweep)

    violated = sweep[sweep.verdict != attribution.Verdict.HOLDS.value]
    if len(violated):
        logger.warning("%d axiom checks did not hold", len(violated))


def _parse_input(text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError as e:
        raise errors.FormatError(f"input is not JSON: {e}") from e
    if not isinstance(value, (list, dict)):
        raise errors.FormatError("input must be a JSON list or object")
    return value


def _cmd_explain(args, config, run: _Run):
    with open(args.graph) as f:
        graph, cut = io.load_graph(f)
    run.inputs.append(Path(args.graph))
    if cut is None:
        cut = compgraph.Cut.trivial(graph)

    x = _parse_input(args.input)
    output, _ = compgraph.evaluate(graph, x)
    explanation = compgraph.explain(graph, cut, x)
    replayed = compgraph.replay(graph, cut, explanation)

    json.dump(
        {
            "output": output,
            "explanation": explanation.as_dict(),
            "replay": replayed,
            "sound": replayed == output,
        },
        sys.stdout,
        indent=2,
        sort_keys=True,
    )
    sys.stdout.write("\n")
    if replayed != output:
        raise errors.ImplementationDefect(
            f"replay gave {replayed!r}, evaluation gave {output!r}"
        )


COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "select": _cmd_select,
    "reduce": _cmd_reduce,
    "retrain": _cmd_retrain,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
    "axioms": _cmd_axioms,
    "explain": _cmd_explain,
}


# ------- parser ---------


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="experiment config JSON")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--print-config", action="store_true")
    parser.add_argument("--timing", action="store_true", help="record wall clock")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")


def _training_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--lambda-mask", type=float)
    parser.add_argument("--lambda-weight", type=float)
    parser.add_argument("--hidden", type=int, nargs=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soundcut", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a cohort and its feature matrix")
    _common(p)
    p.add_argument("--out-cohort", type=Path)
    p.add_argument("--out-matrix", type=Path, required=True)

    p = sub.add_parser("train", help="train a BinMask network")
    _common(p)
    _training_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("select", help="BinMask feature selection")
    _common(p)
    _training_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="selected feature list")
    p.add_argument("--model-out", type=Path)

    p = sub.add_parser("reduce", help="iterative feature removal")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--features", type=Path)
    p.add_argument("--stop-delta", type=float)
    p.add_argument(
        "--stop-baseline", choices=[b.value for b in pipeline.StopBaseline]
    )
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trace", type=Path)

    p = sub.add_parser("retrain", help="retrain on a feature subset")
    _common(p)
    _training_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--test", type=Path)
    p.add_argument("--n-boot", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("experiment", help="run every stage end to end")
    _common(p)
    _training_flags(p)
    p.add_argument("--stop-delta", type=float)
    p.add_argument(
        "--stop-baseline", choices=[b.value for b in pipeline.StopBaseline]
    )
    p.add_argument("--n-boot", type=int)
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = sub.add_parser("report", help="univariate model AUC ranking")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--features", type=Path, help="columns the model reads")
    p.add_argument("--selected", type=Path, help="feature list to flag")
    p.add_argument("--out", type=Path)
    p.add_argument("--svg", type=Path)

    p = sub.add_parser("axioms", help="path attribution axiom checks")
    _common(p)
    p.add_argument("--model", type=Path)
    p.add_argument("--random-mlps", type=int, default=0)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--steps", type=int, default=attribution.DEFAULT_STEPS)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("explain", help="evaluate, explain and replay a graph")
    _common(p)
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--input", required=True, help="JSON list or object")

    return parser


def _setup_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _run(args) -> int:
    config = _load_config(args)
    if args.print_config:
        json.dump(config.to_dict(), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return 0
    if args.command in SEEDED and args.seed is None:
        raise errors.ValidationError(f"{args.command} needs --seed")

    started = time.perf_counter()
    run = _Run()
    COMMANDS[args.command](args, config, run)

    if run.manifest_path is not None:
        manifest = RunManifest(
            tool_version=__version__,
            subcommand=args.command,
            config=config.to_dict(),
            seeds=_seeds(config),
            inputs={str(p): file_digest(p) for p in run.inputs},
            outputs={str(p): file_digest(p) for p in run.outputs},
            wall_clock_s=time.perf_counter() - started if args.timing else None,
        )
        run.manifest_path.parent.mkdir(parents=True, exist_ok=True)
        run.manifest_path.write_text(manifest.dumps())
    return 0


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1

    _setup_logging(args)
    try:
        return _run(args)
    except errors.SoundcutError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
