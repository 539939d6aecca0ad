"""Path-method attribution and checkers for the attribution axioms.

A path method integrates the gradient of `F` along a path from a baseline
`x'` to the input `x`. Integrals use the midpoint rule on `steps` uniform
samples per path segment, which is exact for affine `F`.
"""
import abc
import enum
import logging
import math
import typing as t

import more_itertools as mitt
import numpy as np
import pandas as pd

from . import errors
from .core import model

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
DEFAULT_STEPS = 1024
SPECIFICITY_TOL = 1e-8
FUZZ_TOL = 1e-9
BASELINE_VALUE_TOL = 1e-9


def finite_difference_gradient(
    value: t.Callable[[np.ndarray], float], x, h: float = FD_STEP
) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = np.empty(x.size)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        grad[i] = (value(x + step) - value(x - step)) / (2 * h)
    return grad


class DifferentiableFn(abc.ABC):
    """Real function of `dim` reals. Subclasses provide `value` and, when
    they can, analytic gradients; the default is central differences.
    """

    dim: int

    @abc.abstractmethod
    def value(self, x) -> float:
        ...

    def __call__(self, x) -> float:
        return self.value(x)

    def values(self, X) -> np.ndarray:
        return np.array([self.value(x) for x in np.atleast_2d(X)])

    def gradient(self, x) -> np.ndarray:
        return finite_difference_gradient(self.value, x)

    def gradients(self, X) -> np.ndarray:
        """Gradient at every row of `X`."""
        return np.stack([self.gradient(x) for x in np.atleast_2d(X)])


class AffineFn(DifferentiableFn):
    def __init__(self, coefficients: t.Sequence[float], bias: float = 0.0):
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.bias = float(bias)
        self.dim = self.coefficients.size

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return math.fsum([self.bias, *(self.coefficients * x)])

    def gradient(self, x) -> np.ndarray:
        return self.coefficients.copy()

    def gradients(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.tile(self.coefficients, (X.shape[0], 1))

    def __repr__(self):
        return f"AffineFn({self.coefficients.tolist()}, bias={self.bias!r})"


class CallableFn(DifferentiableFn):
    """Wraps a plain function. Without `grad` the gradient is numeric."""

    def __init__(
        self,
        dim: int,
        fn: t.Callable[[np.ndarray], float],
        grad: t.Optional[t.Callable[[np.ndarray], np.ndarray]] = None,
    ):
        self.dim = dim
        self._fn = fn
        self._grad = grad

    def value(self, x) -> float:
        return float(self._fn(np.asarray(x, dtype=float)))

    def gradient(self, x) -> np.ndarray:
        if self._grad is None:
            return super().gradient(x)
        return np.asarray(self._grad(np.asarray(x, dtype=float)), dtype=float)


class SumFn(DifferentiableFn):
    def __init__(self, *fns: DifferentiableFn):
        if not fns:
            raise errors.ValidationError("SumFn needs at least one function")
        dims = {fn.dim for fn in fns}
        if len(dims) != 1:
            raise errors.ValidationError(f"cannot add functions of dimensions {dims}")
        self.fns = fns
        self.dim = fns[0].dim

    def value(self, x) -> float:
        return math.fsum(fn.value(x) for fn in self.fns)

    def gradient(self, x) -> np.ndarray:
        return sum(fn.gradient(x) for fn in self.fns)

    def gradients(self, X) -> np.ndarray:
        return sum(fn.gradients(X) for fn in self.fns)


class ScaledFn(DifferentiableFn):
    def __init__(self, fn: DifferentiableFn, scale: float):
        self.fn = fn
        self.scale = float(scale)
        self.dim = fn.dim

    def value(self, x) -> float:
        return self.scale * self.fn.value(x)

    def gradient(self, x) -> np.ndarray:
        return self.scale * self.fn.gradient(x)

    def gradients(self, X) -> np.ndarray:
        return self.scale * self.fn.gradients(X)


def _vector(x) -> t.Tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(x, dtype=float).ravel())


class PathKind(enum.Enum):
    STRAIGHT_LINE = "straight-line"
    PIECEWISE_LINEAR = "piecewise-linear"


@model
class PathSpec:
    """Path from `baseline` (t = 0) to `target` (t = 1), straight or through
    `waypoints`.
    """

    baseline: t.Tuple[float, ...]
    target: t.Tuple[float, ...]
    waypoints: t.Tuple[t.Tuple[float, ...], ...] = ()
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        object.__setattr__(self, "baseline", _vector(self.baseline))
        object.__setattr__(self, "target", _vector(self.target))
        object.__setattr__(
            self, "waypoints", tuple(_vector(w) for w in self.waypoints)
        )
        dim = len(self.target)
        if len(self.baseline) != dim or any(len(w) != dim for w in self.waypoints):
            raise errors.ValidationError(
                "path endpoints and waypoints differ in dimension"
            )
        if not np.isfinite(self.vertices).all():
            raise errors.ValidationError("path points must be finite")
        if self.steps < 1:
            raise errors.ValidationError(f"steps must be at least 1, got {self.steps}")

    @classmethod
    def straight(cls, baseline, target, steps: int = DEFAULT_STEPS) -> "PathSpec":
        return cls(baseline=baseline, target=target, steps=steps)

    @property
    def kind(self) -> PathKind:
        return PathKind.PIECEWISE_LINEAR if self.waypoints else PathKind.STRAIGHT_LINE

    @property
    def dim(self) -> int:
        return len(self.target)

    @property
    def vertices(self) -> np.ndarray:
        return np.array([self.baseline, *self.waypoints, self.target], dtype=float)

    def point(self, path_t: float) -> np.ndarray:
        """gamma(t), with segments of equal t-length."""
        vertices = self.vertices
        n_segments = len(vertices) - 1
        segment = min(int(path_t * n_segments), n_segments - 1)
        local = path_t * n_segments - segment
        return vertices[segment] + local * (vertices[segment + 1] - vertices[segment])


@model
class Attribution:
    scores: t.Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", _vector(self.scores))
        if not np.isfinite(self.scores).all():
            raise errors.NumericError(f"non-finite attribution {self.scores}")

    @property
    def array(self) -> np.ndarray:
        return np.array(self.scores)

    @property
    def total(self) -> float:
        return math.fsum(self.scores)

    def __len__(self):
        return len(self.scores)


def path_attribute(fn: DifferentiableFn, path: PathSpec) -> Attribution:
    """Midpoint-rule approximation of `a_i = int_0^1 dF/dx_i(gamma(t))
    dgamma_i(t)`, summed segment by segment.
    """
    if path.dim != fn.dim:
        raise errors.ValidationError(
            f"path has dimension {path.dim}, function has {fn.dim}"
        )

    vertices = path.vertices
    n_segments = len(vertices) - 1
    local_t = (np.arange(path.steps) + 0.5) / path.steps
    scores = np.zeros(fn.dim)

    for segment, (start, end) in enumerate(mitt.pairwise(vertices)):
        displacement = end - start
        if not displacement.any():
            continue
        points = start + local_t[:, None] * displacement
        grads = np.asarray(fn.gradients(points), dtype=float)

        bad_rows = np.flatnonzero(~np.isfinite(grads).all(axis=1))
        if bad_rows.size:
            path_t = (segment + local_t[bad_rows[0]]) / n_segments
            raise errors.NumericError(
                f"non-finite gradient at t = {path_t!r}", path_t=float(path_t)
            )
        scores += grads.mean(axis=0) * displacement

    return Attribution(tuple(scores))


# ------- axioms ---------


class Axiom(enum.Enum):
    SPECIFICITY = "specificity"
    ADDITIVITY = "additivity"
    COMPLETENESS = "completeness"
    BASELINE_INVARIANCE = "baseline-invariance"


class Verdict(enum.Enum):
    HOLDS = "holds"
    VIOLATED = "violated"
    PRECONDITION_UNMET = "precondition-unmet"


@model
class AxiomReport:
    """`witness` holds the arguments that reproduce the verdict when passed
    back to the same checker.
    """

    axiom: Axiom
    verdict: Verdict
    witness: t.Optional[t.Mapping[str, t.Any]] = None
    max_deviation: float = 0.0

    @property
    def holds(self) -> bool:
        return self.verdict == Verdict.HOLDS


def check_specificity(
    fn: DifferentiableFn,
    dead_dims: t.Iterable[int],
    samples: int = 16,
    seed: int = 0,
    steps: int = 64,
    points: t.Optional[t.Sequence[t.Tuple[t.Any, t.Any]]] = None,
) -> AxiomReport:
    """Dead dimensions must get zero scores on straight-line paths. `points`,
    a list of `(x, baseline)` pairs, replaces the random samples.

    Every claimed dead dimension is first fuzzed: a change of `F` under a
    random shift along it is reported as an unmet precondition.
    """
    dead = sorted(int(i) for i in dead_dims)
    if any(not 0 <= i < fn.dim for i in dead):
        raise errors.ValidationError(
            f"dead dims {dead} out of range for dimension {fn.dim}"
        )

    rng = np.random.default_rng(seed)
    if points is None:
        points = [
            (rng.normal(size=fn.dim), rng.normal(size=fn.dim)) for _ in range(samples)
        ]

    max_deviation = 0.0
    for x, baseline in points:
        x = np.asarray(x, dtype=float)
        baseline = np.asarray(baseline, dtype=float)
        f_x = fn.value(x)
        for i in dead:
            delta = float(rng.normal())
            shifted = x.copy()
            shifted[i] += delta
            if abs(fn.value(shifted) - f_x) > FUZZ_TOL:
                return AxiomReport(
                    axiom=Axiom.SPECIFICITY,
                    verdict=Verdict.PRECONDITION_UNMET,
                    witness={"x": _vector(x), "dim": i, "delta": delta},
                )

        scores = path_attribute(fn, PathSpec.straight(baseline, x, steps)).array
        deviation = float(np.abs(scores[dead]).max()) if dead else 0.0
        max_deviation = max(max_deviation, deviation)
        if deviation > SPECIFICITY_TOL:
            return AxiomReport(
                axiom=Axiom.SPECIFICITY,
                verdict=Verdict.VIOLATED,
                witness={
                    "dead_dims": tuple(dead),
                    "x": _vector(x),
                    "baseline": _vector(baseline),
                    "scores": _vector(scores),
                },
                max_deviation=deviation,
            )

    return AxiomReport(Axiom.SPECIFICITY, Verdict.HOLDS, max_deviation=max_deviation)


def check_additivity(
    fn1: DifferentiableFn,
    fn2: DifferentiableFn,
    x,
    baseline,
    tolerance: float = 1e-6,
    steps: int = DEFAULT_STEPS,
) -> AxiomReport:
    if fn1.dim != fn2.dim:
        raise errors.ValidationError(
            f"cannot compare functions of dimensions {fn1.dim} and {fn2.dim}"
        )
    path = PathSpec.straight(baseline, x, steps)
    together = path_attribute(SumFn(fn1, fn2), path).array
    apart = path_attribute(fn1, path).array + path_attribute(fn2, path).array

    deviation = float(np.abs(together - apart).max())
    verdict = Verdict.HOLDS if deviation <= tolerance else Verdict.VIOLATED
    return AxiomReport(
        axiom=Axiom.ADDITIVITY,
        verdict=verdict,
        witness={"x": path.target, "baseline": path.baseline, "steps": steps},
        max_deviation=deviation,
    )


def check_completeness(
    fn: DifferentiableFn,
    x,
    baseline,
    steps: int = DEFAULT_STEPS,
    tolerance: float = 1e-3,
) -> AxiomReport:
    path = PathSpec.straight(baseline, x, steps)
    attribution = path_attribute(fn, path)
    delta = fn.value(path.target) - fn.value(path.baseline)

    deviation = abs(attribution.total - delta)
    verdict = Verdict.HOLDS if deviation <= tolerance else Verdict.VIOLATED
    return AxiomReport(
        axiom=Axiom.COMPLETENESS,
        verdict=verdict,
        witness={
            "x": path.target,
            "baseline": path.baseline,
            "steps": steps,
            "total": attribution.total,
            "delta": delta,
        },
        max_deviation=deviation,
    )


def rank_inversion(
    scores1: np.ndarray, scores2: np.ndarray
) -> t.Optional[t.Tuple[int, int]]:
    """First `(i, j)` with `a_i < a_j` under the first attribution and
    `a_i > a_j` under the second. Ties never count. Indices are 0-based,
    `ImpossibilityReport.render` prints them as 1-based input names.
    """
    scores1 = np.asarray(scores1)
    scores2 = np.asarray(scores2)
    inverted = (scores1[:, None] < scores1[None, :]) & (
        scores2[:, None] > scores2[None, :]
    )
    pairs = np.argwhere(inverted)
    if pairs.size == 0:
        return None
    i, j = pairs[0]
    return int(i), int(j)


def check_baseline_invariance(
    fn: DifferentiableFn,
    x,
    baseline1,
    baseline2,
    steps: int = DEFAULT_STEPS,
) -> AxiomReport:
    """Baselines with equal `F` value must rank the inputs the same way."""
    gap = abs(fn.value(baseline1) - fn.value(baseline2))
    if gap > BASELINE_VALUE_TOL:
        raise errors.PreconditionError(
            f"baselines differ in value by {gap!r}, they must agree within "
            f"{BASELINE_VALUE_TOL}"
        )

    scores1 = path_attribute(fn, PathSpec.straight(baseline1, x, steps)).array
    scores2 = path_attribute(fn, PathSpec.straight(baseline2, x, steps)).array
    deviation = float(np.abs(scores1 - scores2).max())

    witness = {
        "x": _vector(x),
        "baselines": (_vector(baseline1), _vector(baseline2)),
        "steps": steps,
        "attributions": (_vector(scores1), _vector(scores2)),
    }
    pair = rank_inversion(scores1, scores2)
    if pair is None:
        return AxiomReport(
            Axiom.BASELINE_INVARIANCE, Verdict.HOLDS, witness, max_deviation=deviation
        )
    return AxiomReport(
        Axiom.BASELINE_INVARIANCE,
        Verdict.VIOLATED,
        {**witness, "pair": pair},
        max_deviation=deviation,
    )


# ------- impossibility instance ---------


@model
class ImpossibilityReport:
    """Outcome of the linear counterexample showing that no path method
    satisfies all four axioms at once.
    """

    x: t.Tuple[float, ...]
    baselines: t.Tuple[t.Tuple[float, ...], ...]
    attributions: t.Tuple[t.Tuple[float, ...], ...]
    values: t.Tuple[float, ...]
    invariance: AxiomReport
    completeness: t.Tuple[AxiomReport, ...]

    def render(self) -> str:
        def vec(values):
            return "(" + ", ".join(_fmt(v) for v in values) + ")"

        lines = [
            "F(x) = x1 - x2",
            f"x = {vec(self.x)}, F(x) = {_fmt(self.values[0])}",
        ]
        for k, (baseline, scores, value, report) in enumerate(
            zip(self.baselines, self.attributions, self.values[1:], self.completeness),
            1,
        ):
            lines += [
                f"baseline {k}: x' = {vec(baseline)}, F(x') = {_fmt(value)}",
                f"  attribution = {vec(scores)}",
                f"  sum = {_fmt(math.fsum(scores))}, "
                f"F(x) - F(x') = {_fmt(self.values[0] - value)}, "
                f"completeness {report.verdict.value}",
            ]

        i, j = self.invariance.witness["pair"]
        first, second = self.attributions
        lines += [
            f"ranking under baseline 1: x{i + 1} = {_fmt(first[i])} < "
            f"x{j + 1} = {_fmt(first[j])}",
            f"ranking under baseline 2: x{i + 1} = {_fmt(second[i])} > "
            f"x{j + 1} = {_fmt(second[j])}",
            f"verdict: baseline invariance {self.invariance.verdict.value}",
            "specificity, additivity and completeness hold for every path "
            "method, so no path method satisfies all four axioms",
        ]
        return "\n".join(lines) + "\n"


def _fmt(value: float) -> str:
    return f"{value:g}"


DEMO_X = (1.0, 0.0)
DEMO_BASELINES = ((-1.0, -1.0), (1.0, 1.0))
DEMO_ATTRIBUTIONS = ((2.0, -1.0), (0.0, 1.0))


def impossibility_demo(steps: int = DEFAULT_STEPS) -> ImpossibilityReport:
    """Runs `F = x1 - x2` at `x = (1, 0)` against baselines `(-1, -1)` and
    `(1, 1)`. Both baselines have `F = 0` yet they rank `x1` and `x2` in
    opposite orders.
    """
    fn = AffineFn([1.0, -1.0])

    attributions = tuple(
        path_attribute(fn, PathSpec.straight(baseline, DEMO_X, steps)).scores
        for baseline in DEMO_BASELINES
    )
    if attributions != DEMO_ATTRIBUTIONS:
        raise errors.ImplementationDefect(
            f"expected attributions {DEMO_ATTRIBUTIONS}, got {attributions}"
        )

    completeness = tuple(
        check_completeness(fn, DEMO_X, baseline, steps=steps, tolerance=1e-12)
        for baseline in DEMO_BASELINES
    )
    if not all(report.holds for report in completeness):
        raise errors.ImplementationDefect("completeness fails on an affine function")

    invariance = check_baseline_invariance(fn, DEMO_X, *DEMO_BASELINES, steps=steps)
    if invariance.verdict != Verdict.VIOLATED:
        raise errors.ImplementationDefect("expected a rank inversion between baselines")

    return ImpossibilityReport(
        x=DEMO_X,
        baselines=DEMO_BASELINES,
        attributions=attributions,
        values=(fn.value(DEMO_X), *(fn.value(b) for b in DEMO_BASELINES)),
        invariance=invariance,
        completeness=completeness,
    )


def sweep_axioms(
    fns: t.Mapping[str, DifferentiableFn],
    n_pairs: int = 10,
    seed: int = 0,
    steps: int = 2048,
    additivity_tolerance: float = 1e-6,
    completeness_tolerance: float = 1e-3,
    low: float = 0.0,
    high: float = 1.0,
) -> pd.DataFrame:
    """Completeness, additivity and specificity on random `(x, x')` pairs
    drawn uniformly from `[low, high)`. Specificity runs for functions that
    expose `dead_dims`. One row per function, axiom and pair.
    """
    rng = np.random.default_rng(seed)
    rows = []

    for name, fn in fns.items():
        partner = ScaledFn(fn, -0.5)
        for pair_i in range(n_pairs):
            x = rng.uniform(low, high, size=fn.dim)
            baseline = rng.uniform(low, high, size=fn.dim)

            reports = [
                check_completeness(
                    fn, x, baseline, steps=steps, tolerance=completeness_tolerance
                ),
                check_additivity(
                    fn, partner, x, baseline, tolerance=additivity_tolerance, steps=steps
                ),
            ]
            dead = getattr(fn, "dead_dims", None)
            if dead:
                reports.append(
                    check_specificity(
                        fn, dead, points=[(x, baseline)], seed=seed, steps=64
                    )
                )

            for report in reports:
                rows.append(
                    {
                        "function": name,
                        "axiom": report.axiom.value,
                        "pair": pair_i,
                        "verdict": report.verdict.value,
                        "max_deviation": report.max_deviation,
                    }
                )

        logger.debug("Swept axioms for %s over %d pairs", name, n_pairs)

    return pd.DataFrame(
        rows, columns=["function", "axiom", "pair", "verdict", "max_deviation"]
    )
