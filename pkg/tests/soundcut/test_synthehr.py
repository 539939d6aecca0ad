import dataclasses

import hypothesis as h
import hypothesis.strategies as st
import numpy as np
import pytest

from soundcut import errors, synthehr
from soundcut.synthehr import (
    CohortConfig,
    Event,
    EventKind,
    FeatureLayout,
    Patient,
    PlantedCode,
)

DIAG0 = (EventKind.DIAG, 0)
LAB0 = (EventKind.LAB, 0)
TWO_DIAGNOSES = (
    PlantedCode(EventKind.DIAG, 0, 2.0),
    PlantedCode(EventKind.DIAG, 1, 2.0),
)


def _small_config(**changes):
    config = CohortConfig(
        n_positive=120,
        n_negative=120,
        n_diag=6,
        n_med=3,
        n_lab=2,
        planted=TWO_DIAGNOSES,
        seed=3,
    )
    return config.replace(**changes)


@pytest.fixture(scope="module")
def cohort():
    return synthehr.generate_cohort(_small_config())


def _patient():
    return Patient(
        id=7,
        sex=1,
        birth_year=-50,
        events=(
            Event(100, EventKind.DIAG, 0),
            Event(200, EventKind.LAB, 0, 2.0),
            Event(465, EventKind.DIAG, 0),
            Event(565, EventKind.LAB, 0, 3.0),
            Event(830, EventKind.DIAG, 0),
        ),
    )


def _random_events(rng, codes, start, end):
    events = []
    for day in np.sort(rng.integers(start, end, size=int(rng.integers(0, 12)))):
        kind, index = codes[int(rng.integers(len(codes)))]
        value = float(rng.normal(2.0, 1.0)) if kind == EventKind.LAB else None
        events.append(Event(int(day), kind, index, value))
    return tuple(events)


class TestCohortConfig:
    @pytest.mark.parametrize(
        "changes",
        [
            {"sparsity": 1.0},
            {"n_positive": 0},
            {"planted": (PlantedCode(EventKind.MED, 3, 1.0),)},
            {"planted": (PlantedCode(EventKind.DIAG, 0, -1.0),)},
            {"planted": ()},
            {"window_days": 500},
            {"death_rate": 1.5},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(errors.ConfigError):
            _small_config(**changes)

    def test_unknown_key(self):
        with pytest.raises(errors.ConfigError):
            CohortConfig.from_dict({"n_patients": 10})

    def test_dict_round_trip(self):
        config = _small_config()
        assert CohortConfig.from_dict(config.to_dict()) == config

    def test_planted_from_dict(self):
        config = CohortConfig.from_dict(
            {"planted": [{"kind": "lab", "code": 1, "hazard": 0.5}]}
        )
        assert config.planted == (PlantedCode(EventKind.LAB, 1, 0.5),)

    def test_vocabulary_order(self):
        config = _small_config(n_diag=2, n_med=1, n_lab=1)
        assert config.vocabulary == (
            (EventKind.DIAG, 0),
            (EventKind.DIAG, 1),
            (EventKind.MED, 0),
            (EventKind.LAB, 0),
        )


class TestGeneration:
    def test_class_sizes(self, cohort):
        assert len(cohort) == 240
        assert sum(cohort.labels) == 120
        assert set(cohort.diagnosis_days) == {p.id for p in cohort.positives}

    def test_deterministic(self, cohort):
        assert synthehr.generate_cohort(_small_config()) == cohort

    def test_seed_changes_the_cohort(self, cohort):
        assert synthehr.generate_cohort(_small_config(seed=4)) != cohort

    def test_ground_truth(self, cohort):
        assert cohort.ground_truth == {DIAG0, (EventKind.DIAG, 1)}

    def test_events_are_well_formed(self, cohort):
        for patient in cohort.patients:
            days = [e.day for e in patient.events]
            assert days == sorted(days)
            for event in patient.events:
                assert (event.value is not None) == (event.kind == EventKind.LAB)

    def test_planted_codes_are_enriched_in_positives(self):
        config = _small_config(n_positive=300, n_negative=300, sparsity=0.7)
        cohort = synthehr.generate_cohort(config)

        def mean_count(label):
            counts = [
                sum(e.code_id == DIAG0 for e in p.events)
                for p, y in zip(cohort.patients, cohort.labels)
                if y == label
            ]
            return np.mean(counts)

        assert mean_count(1) > 1.5 * mean_count(0)

    def test_infeasible_sparsity(self):
        config = CohortConfig(
            n_diag=2, n_med=0, n_lab=0, planted=TWO_DIAGNOSES, sparsity=0.01
        )
        with pytest.raises(errors.ConfigError):
            synthehr.generate_cohort(config)

    def test_density_is_near_the_target(self):
        config = CohortConfig(n_positive=200, n_negative=800, seed=5)
        cohort = synthehr.generate_cohort(config)
        cohort = cohort.subset(synthehr.quality_filter(cohort.patients))
        layout = FeatureLayout.from_vocabulary(config.vocabulary)
        rng = np.random.default_rng(0)
        pool = synthehr.positive_cutoff_pool(cohort, rng)
        cutoffs = synthehr.sample_cutoffs(cohort, pool, rng, 3650)
        density = synthehr.build_matrix(cohort, cutoffs, layout).density
        assert config.sparsity - 0.03 <= 1 - density <= config.sparsity + 0.03


class TestFilters:
    @pytest.mark.parametrize("day,kept", [(160, True), (161, False)])
    def test_events_after_death(self, day, kept):
        patient = Patient(
            id=1, sex=0, birth_year=-40, death_day=100, events=(Event(day, *DIAG0),)
        )
        assert (synthehr.quality_filter([patient]) == [patient]) == kept

    def test_bad_records_are_generated_and_removed(self):
        config = _small_config(death_rate=1.0, bad_record_rate=1.0)
        cohort = synthehr.generate_cohort(config)
        assert synthehr.quality_filter(cohort.patients) == []

    def test_filter_codes_counts_positives(self):
        rare = (EventKind.MED, 0)
        patients = (
            Patient(0, 0, -40, events=(Event(10, *DIAG0), Event(11, *rare))),
            Patient(1, 0, -40, events=(Event(10, *DIAG0),)),
            Patient(2, 0, -40, events=(Event(10, *rare), Event(12, *rare))),
        )
        cohort = synthehr.Cohort(
            patients=patients,
            labels=(1, 1, 0),
            diagnosis_days={0: 100, 1: 100},
            ground_truth=frozenset(),
        )
        assert synthehr.filter_codes(cohort, 0.6) == (DIAG0,)
        assert synthehr.filter_codes(cohort, 0.5) == (DIAG0, rare)


class TestCutoffs:
    def test_positive_offsets(self):
        rng = np.random.default_rng(0)
        offsets = [1000 - synthehr.positive_cutoff(1000, rng) for _ in range(500)]
        assert min(offsets) >= 180
        assert max(offsets) <= 540

    def test_negative_cutoffs_are_clamped_to_the_window(self):
        patient = Patient(id=1, sex=0, birth_year=-40, death_day=300)
        rng = np.random.default_rng(0)
        pool = np.array([5000, 5000])
        assert synthehr.sample_cutoff(patient, 0, pool, rng, window_days=3650) == 300

    def test_positive_needs_a_diagnosis(self):
        with pytest.raises(errors.ValidationError):
            synthehr.sample_cutoff(
                _patient(), 1, np.array([10]), np.random.default_rng(0)
            )

    def test_cutoffs_of_a_cohort(self, cohort):
        rng = np.random.default_rng(1)
        pool = synthehr.positive_cutoff_pool(cohort, rng)
        assert pool.size == 120
        cutoffs = synthehr.sample_cutoffs(cohort, pool, rng, 3650)
        for patient, label, cutoff in zip(cohort.patients, cohort.labels, cutoffs):
            if label:
                diagnosis = cohort.diagnosis_days[patient.id]
                assert diagnosis - 540 <= cutoff <= diagnosis - 180
            else:
                assert 1 <= cutoff <= synthehr.observation_end(patient, 3650)


class TestFeatures:
    def test_layout(self):
        layout = FeatureLayout.from_vocabulary([LAB0, DIAG0])
        assert layout.vocabulary == (DIAG0, LAB0)
        assert layout.n_columns == 5 + 9 + 3
        assert layout.columns[:2] == ["diag:0[e]", "diag:0[fd]"]
        assert layout.columns[5] == "lab:0[e]"
        assert layout.columns[-3:] == ["age", "sex", "encounter_frequency"]
        assert list(layout.columns_of([LAB0, (EventKind.MED, 4)])) == list(range(5, 14))

    def test_derive_features(self):
        layout = FeatureLayout.from_vocabulary([DIAG0, LAB0])
        row = synthehr.derive_features(_patient(), 830, layout)
        expected = {
            # diag:0, the event on the cutoff day is excluded
            0: 1.0,
            1: 2.0,
            2: 1.0,
            3: 1.0,
            4: 2.0,
            # lab:0
            5: 1.0,
            6: 630 / 365,
            7: 265 / 365,
            8: 1.0,
            9: 2.0,
            10: 3.0,
            11: 1.0,
            12: 1.0 / 365,
            13: 1.0,
            # globals
            14: 50 + 830 / 365,
            15: 1.0,
            16: 4 / (830 / 365),
        }
        assert row.keys() == expected.keys()
        for col, value in expected.items():
            assert row[col] == pytest.approx(value), layout.columns[col]

    @h.given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    def test_events_from_the_cutoff_on_are_ignored(self, seed):
        rng = np.random.default_rng(seed)
        codes = [DIAG0, (EventKind.MED, 0), LAB0]
        layout = FeatureLayout.from_vocabulary(codes)
        cutoff = int(rng.integers(1, 3000))
        patient = Patient(
            id=1,
            sex=int(rng.integers(0, 2)),
            birth_year=-50,
            events=_random_events(rng, codes, 0, cutoff),
        )
        # the first appended event lands on the cutoff day itself
        later = (Event(cutoff, *DIAG0),) + _random_events(
            rng, codes, cutoff, cutoff + 2000
        )
        leaked = dataclasses.replace(patient, events=patient.events + later)

        expected = synthehr.derive_features(patient, cutoff, layout)
        assert synthehr.derive_features(leaked, cutoff, layout) == expected

    def test_empty_history(self):
        layout = FeatureLayout.from_vocabulary([DIAG0, LAB0])
        row = synthehr.derive_features(_patient(), 50, layout)
        # only age and sex remain
        assert sorted(row) == [14, 15]

    def test_single_lab_value_has_no_slope(self):
        layout = FeatureLayout.from_vocabulary([LAB0])
        row = synthehr.derive_features(_patient(), 300, layout)
        assert row[5] == 2.0  # v
        assert 7 not in row  # s
        assert 8 not in row  # se

    @pytest.mark.parametrize(
        "days,values,slope",
        [
            ([0, 10], [1.0, 2.0], 0.1),
            ([0, 10, 20], [3.0, 2.0, 1.0], -0.1),
            ([5], [1.0], None),
            ([5, 5], [1.0, 2.0], None),
        ],
    )
    def test_least_squares_slope(self, days, values, slope):
        result = synthehr.least_squares_slope(np.array(days), np.array(values))
        assert result == (None if slope is None else pytest.approx(slope))

    def test_build_matrix(self, cohort):
        layout = FeatureLayout.from_vocabulary(_small_config().vocabulary)
        cutoffs = np.full(len(cohort), 2000)
        fm = synthehr.build_matrix(cohort, cutoffs, layout)
        assert fm.shape == (240, layout.n_columns)
        assert fm.columns == tuple(layout.columns)

        selected = fm.select([0, layout.global_index("age")])
        assert selected.columns == ("diag:0[e]", "age")
        assert (selected.matrix[:, 1].toarray() > 0).all()


class TestCutoffRefresher:
    def test_rows_and_columns(self, cohort):
        layout = FeatureLayout.from_vocabulary(_small_config().vocabulary)
        rng = np.random.default_rng(0)
        pool = synthehr.positive_cutoff_pool(cohort, rng)
        refresher = synthehr.CutoffRefresher(cohort, layout, pool, 3650)

        batch = refresher(np.array([3, 1, 4]), rng)
        assert batch.shape == (3, layout.n_columns)

        narrow = refresher.restricted([0, 2])(np.array([3, 1, 4]), rng)
        assert narrow.shape == (3, 2)
