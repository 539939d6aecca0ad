"""Synthetic EHR-like cohorts with planted risk codes, the cohort filters,
cutoff sampling and fixed-length feature derivation.

Days are integer indices into each patient's observation window; months are
30 days and years 365 days. Only events strictly before a cutoff contribute
to that cutoff's features.
"""
import dataclasses
import enum
import logging
import typing as t

import numpy as np
import scipy.optimize
import scipy.sparse
from more_itertools import bucket

from . import errors
from .core import DAYS_PER_MONTH, DAYS_PER_YEAR, ConfigMixin, model
from .generic_structs import IndexSet

logger = logging.getLogger(__name__)

MIN_CUTOFF_OFFSET = 6 * DAYS_PER_MONTH
MAX_CUTOFF_OFFSET = 18 * DAYS_PER_MONTH
DEATH_GRACE_DAYS = 2 * DAYS_PER_MONTH


class EventKind(enum.Enum):
    DIAG = "diag"
    MED = "med"
    LAB = "lab"


KIND_ORDER = (EventKind.DIAG, EventKind.MED, EventKind.LAB)

CodeId = t.Tuple[EventKind, int]


def code_sort_key(code: CodeId) -> t.Tuple[int, int]:
    kind, index = code
    return KIND_ORDER.index(kind), index


def code_name(code: CodeId) -> str:
    kind, index = code
    return f"{kind.value}:{index}"


@model
class Event:
    day: int
    kind: EventKind
    code: int
    value: t.Optional[float] = None

    def __post_init__(self):
        if (self.kind == EventKind.LAB) != (self.value is not None):
            raise errors.ValidationError(
                f"lab events carry a value and other events do not: {self}"
            )

    @property
    def code_id(self) -> CodeId:
        return self.kind, self.code


@model
class Patient:
    id: int
    sex: int
    birth_year: int
    death_day: t.Optional[int] = None
    events: t.Tuple[Event, ...] = ()

    def __post_init__(self):
        events = tuple(self.events)
        if any(a.day > b.day for a, b in zip(events, events[1:])):
            raise errors.ValidationError(f"events of patient {self.id} are not sorted")
        object.__setattr__(self, "events", events)

    @property
    def birth_day(self) -> int:
        return self.birth_year * DAYS_PER_YEAR


@model
class PlantedCode:
    kind: EventKind
    code: int
    hazard: float

    @property
    def code_id(self) -> CodeId:
        return self.kind, self.code


def _planted(data) -> PlantedCode:
    if isinstance(data, PlantedCode):
        return data
    return PlantedCode(
        kind=EventKind(data["kind"]), code=data["code"], hazard=data["hazard"]
    )


# Six diagnoses and four medications with a strong pre-diagnosis enrichment.
DEFAULT_PLANTED = tuple(
    PlantedCode(kind, code, 3.0)
    for kind, n_codes in [(EventKind.DIAG, 6), (EventKind.MED, 4)]
    for code in range(n_codes)
)


@model
class CohortConfig(ConfigMixin):
    """`hazard` of a planted code multiplies its event rate by `1 + hazard`
    for positives before diagnosis. Planted lab codes also shift the
    positives' lab values by `hazard`.
    """

    n_positive: int = 1000
    n_negative: int = 4000
    n_diag: int = 20
    n_med: int = 10
    n_lab: int = 5
    planted: t.Tuple[PlantedCode, ...] = DEFAULT_PLANTED
    sparsity: float = 0.94
    window_days: int = 3650
    rate_spread: float = 0.5
    death_rate: float = 0.05
    bad_record_rate: float = 0.2
    min_birth_year: int = -85
    max_birth_year: int = -40
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "planted", tuple(_planted(p) for p in self.planted))
        if self.n_positive < 1 or self.n_negative < 1:
            raise errors.ConfigError("both classes need at least one patient")
        if min(self.n_diag, self.n_med, self.n_lab) < 0 or self.n_codes == 0:
            raise errors.ConfigError("the vocabulary must not be empty")
        if not 0 < self.sparsity < 1:
            raise errors.ConfigError(f"sparsity must be in (0, 1), got {self.sparsity}")
        if not self.planted:
            raise errors.ConfigError("at least one planted code is required")
        for p in self.planted:
            if not 0 <= p.code < self.vocab_size(p.kind):
                raise errors.ConfigError(
                    f"planted code {code_name(p.code_id)} not in vocabulary"
                )
            if p.hazard < 0:
                raise errors.ConfigError("planted hazards must be non-negative")
        if self.window_days < 2 * (MAX_CUTOFF_OFFSET + 1):
            raise errors.ConfigError(
                f"observation window of {self.window_days} days cannot hold the "
                f"{MAX_CUTOFF_OFFSET}-day cutoff offsets"
            )
        if not (0 <= self.death_rate <= 1 and 0 <= self.bad_record_rate <= 1):
            raise errors.ConfigError("death and bad-record rates must be in [0, 1]")
        if self.min_birth_year > self.max_birth_year:
            raise errors.ConfigError("empty birth year range")

    @classmethod
    def _coerce(cls, data):
        if "planted" in data:
            data["planted"] = tuple(_planted(p) for p in data["planted"])
        return data

    def to_dict(self):
        out = super().to_dict()
        out["planted"] = [
            {"kind": p.kind.value, "code": p.code, "hazard": p.hazard}
            for p in self.planted
        ]
        return out

    def vocab_size(self, kind: EventKind) -> int:
        return {
            EventKind.DIAG: self.n_diag,
            EventKind.MED: self.n_med,
            EventKind.LAB: self.n_lab,
        }[kind]

    @property
    def n_codes(self) -> int:
        return self.n_diag + self.n_med + self.n_lab

    @property
    def vocabulary(self) -> t.Tuple[CodeId, ...]:
        return tuple(
            (kind, index)
            for kind in KIND_ORDER
            for index in range(self.vocab_size(kind))
        )


@model
class Cohort:
    patients: t.Tuple[Patient, ...]
    labels: t.Tuple[int, ...]
    diagnosis_days: t.Mapping[int, int]
    ground_truth: t.FrozenSet[CodeId]

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if len(self.patients) != len(self.labels):
            raise errors.ValidationError(
                f"{len(self.patients)} patients for {len(self.labels)} labels"
            )
        for patient, label in zip(self.patients, self.labels):
            if label == 1 and patient.id not in self.diagnosis_days:
                raise errors.ValidationError(
                    f"positive patient {patient.id} has no diagnosis date"
                )

    @property
    def label_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=int)

    @property
    def positives(self) -> t.List[Patient]:
        return [p for p, y in zip(self.patients, self.labels) if y == 1]

    def subset(self, keep: t.Iterable[Patient]) -> "Cohort":
        """Cohort restricted to `keep`, in the original order."""
        keep_ids = {p.id for p in keep}
        rows = [i for i, p in enumerate(self.patients) if p.id in keep_ids]
        return self.take(rows)

    def take(self, rows: t.Sequence[int]) -> "Cohort":
        patients = [self.patients[i] for i in rows]
        ids = {p.id for p in patients}
        return Cohort(
            patients=tuple(patients),
            labels=tuple(self.labels[i] for i in rows),
            diagnosis_days={k: v for k, v in self.diagnosis_days.items() if k in ids},
            ground_truth=self.ground_truth,
        )

    def __len__(self):
        return len(self.patients)


# ------- generation ---------


def _expected_nonzero(kind: EventKind, expected_events: np.ndarray) -> np.ndarray:
    """Expected nonzero columns of one code given Poisson event counts."""
    p_one = -np.expm1(-expected_events)
    p_two = 1 - np.exp(-expected_events) * (1 + expected_events)
    if kind == EventKind.LAB:
        return 6 * p_one + 3 * p_two
    return 4 * p_one + p_two


def _history_grid(config: CohortConfig, size: int = 64) -> np.ndarray:
    """Typical history lengths before a cutoff, in days."""
    half = config.window_days / 2
    diagnosis = half + (np.arange(size) + 0.5) / size * (config.window_days - half)
    return diagnosis - (MIN_CUTOFF_OFFSET + MAX_CUTOFF_OFFSET) / 2


def calibrate_base_rate(config: CohortConfig, multipliers: np.ndarray) -> float:
    """Daily background event rate at which the expected density of the
    derived matrix matches `1 - config.sparsity`, counting the planted
    enrichment of the positive share of the cohort.
    """
    layout_kinds = [kind for kind, _ in config.vocabulary]
    n_columns = sum(len(LETTERS[kind]) for kind in layout_kinds) + len(GLOBAL_FEATURES)
    # age is always nonzero, sex half the time, encounter frequency almost always
    global_nonzero = 2.5
    target = (1 - config.sparsity) * n_columns - global_nonzero
    reachable = sum(len(LETTERS[kind]) for kind in layout_kinds)
    if not 0 < target < reachable:
        raise errors.ConfigError(
            f"sparsity {config.sparsity} is infeasible for {n_columns} columns"
        )

    history = _history_grid(config)
    hazards = {p.code_id: p.hazard for p in config.planted}
    positive_share = config.n_positive / (config.n_positive + config.n_negative)

    def gap(log_rate: float) -> float:
        total = 0.0
        for code, multiplier in zip(config.vocabulary, multipliers):
            kind, _ = code
            expected = np.exp(log_rate) * multiplier * history
            nonzero = _expected_nonzero(kind, expected).mean()
            hazard = hazards.get(code, 0.0)
            if hazard:
                enriched = _expected_nonzero(kind, expected * (1 + hazard)).mean()
                nonzero += positive_share * (enriched - nonzero)
            total += nonzero
        return total - target

    log_rate = scipy.optimize.brentq(gap, -30.0, 5.0, xtol=1e-10)
    return float(np.exp(log_rate))


def _lab_means(config: CohortConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(1.0, 3.0, size=config.n_lab)


def _events_in(
    rng: np.random.Generator,
    code: CodeId,
    rate: float,
    start: int,
    end: int,
    lab_mean: float,
) -> t.List[Event]:
    if end <= start:
        return []
    count = rng.poisson(rate * (end - start))
    days = rng.integers(start, end, size=count)
    kind, index = code
    if kind == EventKind.LAB:
        values = rng.normal(lab_mean, 1.0, size=count)
        return [Event(int(d), kind, index, float(v)) for d, v in zip(days, values)]
    return [Event(int(d), kind, index) for d in days]


def generate_cohort(config: CohortConfig) -> Cohort:
    """Background Poisson events for every code, with planted codes enriched
    in positives before their diagnosis date.
    """
    rng = np.random.default_rng(config.seed)
    vocabulary = config.vocabulary
    multipliers = rng.lognormal(0.0, config.rate_spread, size=len(vocabulary))
    base_rate = calibrate_base_rate(config, multipliers)
    lab_means = _lab_means(config, rng)
    hazards = {p.code_id: p.hazard for p in config.planted}
    logger.info("Background event rate %.3g per code-day", base_rate)

    n_patients = config.n_positive + config.n_negative
    labels = rng.permutation(
        np.repeat([1, 0], [config.n_positive, config.n_negative])
    )
    window = config.window_days

    patients, diagnosis_days = [], {}
    for patient_id, label in enumerate(labels):
        sex = int(rng.integers(0, 2))
        birth_year = int(rng.integers(config.min_birth_year, config.max_birth_year + 1))

        diagnosis = int(rng.integers(window // 2, window)) if label else None
        death_day = None
        if rng.random() < config.death_rate:
            earliest = diagnosis + 1 if diagnosis is not None else window // 2
            death_day = int(rng.integers(earliest, window + 1))
        end = window if death_day is None else min(window, death_day + 1)

        events = []
        for (kind, index), multiplier in zip(vocabulary, multipliers):
            rate = base_rate * multiplier
            lab_mean = lab_means[index] if kind == EventKind.LAB else 0.0
            hazard = hazards.get((kind, index), 0.0)
            if label and hazard:
                events += _events_in(
                    rng, (kind, index), rate * (1 + hazard), 0, diagnosis,
                    lab_mean + hazard,
                )
                events += _events_in(rng, (kind, index), rate, diagnosis, end, lab_mean)
            else:
                events += _events_in(rng, (kind, index), rate, 0, end, lab_mean)

        if death_day is not None and rng.random() < config.bad_record_rate:
            kind, index = vocabulary[int(rng.integers(len(vocabulary)))]
            day = death_day + int(rng.integers(DEATH_GRACE_DAYS + 1, 2 * DAYS_PER_YEAR))
            value = float(lab_means[index]) if kind == EventKind.LAB else None
            events.append(Event(day, kind, index, value))

        events.sort(key=lambda e: (e.day, code_sort_key(e.code_id)))
        patients.append(
            Patient(
                id=patient_id,
                sex=sex,
                birth_year=birth_year,
                death_day=death_day,
                events=tuple(events),
            )
        )
        if label:
            diagnosis_days[patient_id] = diagnosis

    logger.info(
        "Generated %d patients (%d positive)", n_patients, config.n_positive
    )
    return Cohort(
        patients=tuple(patients),
        labels=tuple(int(y) for y in labels),
        diagnosis_days=diagnosis_days,
        ground_truth=frozenset(hazards),
    )


# ------- filters ---------


def quality_filter(patients: t.Iterable[Patient]) -> t.List[Patient]:
    """Drops patients with any event more than two months after death."""
    kept = []
    for patient in patients:
        if patient.death_day is not None and any(
            e.day > patient.death_day + DEATH_GRACE_DAYS for e in patient.events
        ):
            logger.debug("Dropping patient %d: events after death", patient.id)
            continue
        kept.append(patient)
    return kept


def filter_codes(cohort: Cohort, min_fraction: float = 0.01) -> t.Tuple[CodeId, ...]:
    """Codes present in at least `min_fraction` of the positive patients."""
    positives = cohort.positives
    if not positives:
        raise errors.ValidationError("code filtering needs positive patients")

    counts: t.Dict[CodeId, int] = {}
    for patient in positives:
        for code in {e.code_id for e in patient.events}:
            counts[code] = counts.get(code, 0) + 1

    threshold = min_fraction * len(positives)
    kept = sorted((c for c, n in counts.items() if n >= threshold), key=code_sort_key)
    logger.info("Kept %d of %d codes", len(kept), len(counts))
    return tuple(kept)


# ------- cutoffs ---------


def positive_cutoff(diagnosis_day: int, rng: np.random.Generator) -> int:
    return diagnosis_day - int(rng.integers(MIN_CUTOFF_OFFSET, MAX_CUTOFF_OFFSET + 1))


def positive_cutoff_pool(
    cohort: Cohort, rng: np.random.Generator, draws_per_patient: int = 1
) -> np.ndarray:
    """Empirical positive cutoff days that negatives resample from."""
    pool = [
        positive_cutoff(cohort.diagnosis_days[p.id], rng)
        for p in cohort.positives
        for _ in range(draws_per_patient)
    ]
    if not pool:
        raise errors.ValidationError("cutoff pool needs positive patients")
    return np.array(pool, dtype=int)


def observation_end(patient: Patient, window_days: t.Optional[int] = None) -> int:
    """Last day a cutoff may fall on for this patient."""
    ends = [d for d in (patient.death_day, window_days) if d is not None]
    if not ends and patient.events:
        ends = [patient.events[-1].day + 1]
    return min(ends) if ends else 1


def sample_cutoff(
    patient: Patient,
    label: int,
    positive_pool: np.ndarray,
    rng: np.random.Generator,
    diagnosis_day: t.Optional[int] = None,
    window_days: t.Optional[int] = None,
) -> int:
    """Positives: diagnosis day minus a uniform 6 to 18 month offset.
    Negatives: a resampled positive cutoff, clamped into the patient's
    observation window.
    """
    if label == 1:
        if diagnosis_day is None:
            raise errors.ValidationError(
                f"positive patient {patient.id} has no diagnosis date"
            )
        return positive_cutoff(diagnosis_day, rng)
    cutoff = int(rng.choice(positive_pool))
    return int(np.clip(cutoff, 1, observation_end(patient, window_days)))


def sample_cutoffs(
    cohort: Cohort,
    positive_pool: np.ndarray,
    rng: np.random.Generator,
    window_days: t.Optional[int] = None,
) -> np.ndarray:
    return np.array(
        [
            sample_cutoff(
                patient,
                label,
                positive_pool,
                rng,
                diagnosis_day=cohort.diagnosis_days.get(patient.id),
                window_days=window_days,
            )
            for patient, label in zip(cohort.patients, cohort.labels)
        ],
        dtype=int,
    )


# ------- features ---------

CODE_LETTERS = ("e", "fd", "ld", "p", "f")
LAB_LETTERS = CODE_LETTERS + ("v", "ve", "s", "se")
LETTERS = {
    EventKind.DIAG: CODE_LETTERS,
    EventKind.MED: CODE_LETTERS,
    EventKind.LAB: LAB_LETTERS,
}
GLOBAL_FEATURES = ("age", "sex", "encounter_frequency")

# Every value feature and the existence flag it is paired with.
EXISTENCE_PAIRS = {
    "fd": "e",
    "ld": "e",
    "p": "e",
    "f": "e",
    "v": "ve",
    "s": "se",
}


@model
class FeatureSpec:
    code: CodeId
    letters: t.Tuple[str, ...]

    @property
    def names(self) -> t.List[str]:
        return [f"{code_name(self.code)}[{letter}]" for letter in self.letters]


@dataclasses.dataclass(frozen=True)
class FeatureLayout:
    """Column bookkeeping: per-code blocks in vocabulary order, then the
    global features.
    """

    specs: t.Tuple[FeatureSpec, ...]

    @classmethod
    def from_vocabulary(cls, vocabulary: t.Iterable[CodeId]) -> "FeatureLayout":
        codes = sorted(set(vocabulary), key=code_sort_key)
        return cls(tuple(FeatureSpec(code, LETTERS[code[0]]) for code in codes))

    @property
    def columns(self) -> t.List[str]:
        return [name for spec in self.specs for name in spec.names] + list(
            GLOBAL_FEATURES
        )

    @property
    def n_columns(self) -> int:
        return sum(len(spec.letters) for spec in self.specs) + len(GLOBAL_FEATURES)

    @property
    def vocabulary(self) -> t.Tuple[CodeId, ...]:
        return tuple(spec.code for spec in self.specs)

    def offsets(self) -> t.Dict[CodeId, int]:
        out, offset = {}, 0
        for spec in self.specs:
            out[spec.code] = offset
            offset += len(spec.letters)
        return out

    def global_index(self, name: str) -> int:
        return self.n_columns - len(GLOBAL_FEATURES) + GLOBAL_FEATURES.index(name)

    def columns_of(self, codes: t.Iterable[CodeId]) -> IndexSet:
        """Column indices derived from `codes`; codes outside the layout are
        skipped.
        """
        offsets = self.offsets()
        letters = {spec.code: spec.letters for spec in self.specs}
        return IndexSet(
            offsets[code] + k
            for code in codes
            if code in offsets
            for k in range(len(letters[code]))
        )


def least_squares_slope(days: np.ndarray, values: np.ndarray) -> t.Optional[float]:
    """Slope of `value ~ day` in value units per day; None with fewer than
    two distinct days.
    """
    days = np.asarray(days, dtype=float)
    values = np.asarray(values, dtype=float)
    if days.size < 2:
        return None
    centered = days - days.mean()
    denominator = float(centered @ centered)
    if denominator == 0.0:
        return None
    return float(centered @ (values - values.mean())) / denominator


def derive_features(
    patient: Patient, cutoff: int, layout: FeatureLayout
) -> t.Dict[int, float]:
    """Nonzero entries of the patient's feature row at `cutoff`, by column."""
    row: t.Dict[int, float] = {}
    history = [e for e in patient.events if e.day < cutoff]
    offsets = layout.offsets()

    by_code = bucket(history, key=lambda e: e.code_id)
    for code in offsets:
        events = list(by_code[code])
        if not events:
            continue
        letters = LETTERS[code[0]]
        first, last = events[0].day, events[-1].day
        values = {
            "e": 1.0,
            "fd": (cutoff - first) / DAYS_PER_YEAR,
            "ld": (cutoff - last) / DAYS_PER_YEAR,
            "p": (last - first) / DAYS_PER_YEAR,
            "f": float(len(events)),
        }
        if code[0] == EventKind.LAB:
            values["v"] = events[-1].value
            values["ve"] = 1.0
            slope = least_squares_slope(
                np.array([e.day for e in events]), np.array([e.value for e in events])
            )
            if slope is not None:
                values["s"] = slope
                values["se"] = 1.0

        for k, letter in enumerate(letters):
            value = values.get(letter, 0.0)
            if value != 0.0:
                row[offsets[code] + k] = float(value)

    age = (cutoff - patient.birth_day) / DAYS_PER_YEAR
    encounter_days = len({e.day for e in history})
    years = cutoff / DAYS_PER_YEAR
    for name, value in (
        ("age", age),
        ("sex", float(patient.sex)),
        ("encounter_frequency", encounter_days / years if years > 0 else 0.0),
    ):
        if value != 0.0:
            row[layout.global_index(name)] = float(value)
    return row


@dataclasses.dataclass(frozen=True)
class FeatureMatrix:
    matrix: scipy.sparse.csr_matrix
    columns: t.Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.matrix.shape[1] != len(self.columns):
            raise errors.ValidationError(
                f"{self.matrix.shape[1]} columns for {len(self.columns)} names"
            )

    @property
    def shape(self) -> t.Tuple[int, int]:
        return self.matrix.shape

    @property
    def density(self) -> float:
        rows, cols = self.matrix.shape
        return self.matrix.count_nonzero() / (rows * cols) if rows * cols else 0.0

    def take(self, rows) -> "FeatureMatrix":
        return FeatureMatrix(self.matrix[np.asarray(rows)], self.columns)

    def select(self, columns: t.Iterable[int]) -> "FeatureMatrix":
        """Only `columns`, in ascending order; the rest are absent."""
        columns = IndexSet(columns).as_array()
        return FeatureMatrix(
            self.matrix[:, columns], tuple(self.columns[i] for i in columns)
        )


def derive_rows(
    patients: t.Sequence[Patient], cutoffs: t.Sequence[int], layout: FeatureLayout
) -> scipy.sparse.csr_matrix:
    if len(patients) != len(cutoffs):
        raise errors.ValidationError(
            f"{len(cutoffs)} cutoffs for {len(patients)} patients"
        )

    rows, cols, vals = [], [], []
    for row_i, (patient, cutoff) in enumerate(zip(patients, cutoffs)):
        for col, value in sorted(derive_features(patient, int(cutoff), layout).items()):
            rows.append(row_i)
            cols.append(col)
            vals.append(value)
    return scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(len(patients), layout.n_columns), dtype=float
    )


def build_matrix(
    cohort: Cohort, cutoffs: t.Sequence[int], layout: FeatureLayout
) -> FeatureMatrix:
    return FeatureMatrix(derive_rows(cohort.patients, cutoffs, layout), layout.columns)


class CutoffRefresher:
    """Minibatch refresh callback for `neural.train`: draws new cutoffs for
    the batch's patients and re-derives their rows.
    """

    def __init__(
        self,
        cohort: Cohort,
        layout: FeatureLayout,
        positive_pool: np.ndarray,
        window_days: t.Optional[int] = None,
        columns: t.Optional[t.Iterable[int]] = None,
    ):
        self.cohort = cohort
        self.layout = layout
        self.positive_pool = positive_pool
        self.window_days = window_days
        self.columns = None if columns is None else IndexSet(columns).as_array()

    def __call__(self, rows: np.ndarray, rng: np.random.Generator):
        patients = [self.cohort.patients[i] for i in rows]
        cutoffs = [
            sample_cutoff(
                patient,
                self.cohort.labels[i],
                self.positive_pool,
                rng,
                diagnosis_day=self.cohort.diagnosis_days.get(patient.id),
                window_days=self.window_days,
            )
            for i, patient in zip(rows, patients)
        ]
        matrix = derive_rows(patients, cutoffs, self.layout)
        if self.columns is not None:
            matrix = matrix[:, self.columns]
        return matrix

    def restricted(self, columns: t.Iterable[int]) -> "CutoffRefresher":
        return CutoffRefresher(
            self.cohort, self.layout, self.positive_pool, self.window_days, columns
        )
