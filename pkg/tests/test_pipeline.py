from dataclasses import asdict

import numpy as np
import pytest

from flexcohort import pipeline
from flexcohort.cohort import DEFAULT_THRESHOLDS, FlexibleWindowSpec, build_flexible
from flexcohort.ensembles import BoostHyperparams, TreeHyperparams
from flexcohort.errors import InvalidConfig, TestSetAccessError, ValidationError
from flexcohort.featurize import AGE_REFERENCE, FeatureSpec, featurize
from flexcohort.pipeline import (
    PRESETS,
    ExperimentConfig,
    SealedTestSet,
    experiment_from_dict,
    run_experiment,
    run_on_matrix,
    run_preset,
    run_threshold_sweep,
)
from flexcohort.preprocess import data_digest, split

HOMELESS = "homelessness"
FAST_FOREST = TreeHyperparams(n_estimators=15)
FAST_BOOST = BoostHyperparams(n_estimators=40, learning_rate=0.1)


def fast_config(**kw):
    kw.setdefault("presets", pipeline.PRESET_NAMES)
    return ExperimentConfig(HOMELESS, FlexibleWindowSpec(0, HOMELESS), forest=FAST_FOREST, boost=FAST_BOOST, **kw)


@pytest.fixture(scope="module")
def matrix(small_corpus, codemap):
    store, _ = small_corpus
    cohort = build_flexible(store, codemap, FlexibleWindowSpec(0, HOMELESS))
    return featurize(store, cohort, codemap, FeatureSpec.default(codemap))


class TestPresets:
    def test_definitions(self):
        table = {n: (p.feature_mode, p.use_pt, p.use_rote, p.calibration) for n, p in PRESETS.items()}
        assert table == {
            "model1": ("dichotomous", False, False, "fixed_half"),
            "model2": ("dichotomous", False, False, "youden"),
            "model3": ("multivariable", True, True, "youden"),
            "rf": ("multivariable", True, True, "youden"),
            "boost": ("multivariable", True, True, "youden"),
        }

    def test_model3_differs_from_model2_only_in_preprocessing(self):
        a, b = asdict(PRESETS["model2"]), asdict(PRESETS["model3"])
        diff = {k for k in a if a[k] != b[k]}
        assert diff == {"name", "feature_mode", "use_pt", "use_rote"}

    def test_unknown(self):
        with pytest.raises(InvalidConfig):
            pipeline.get_preset("svm")


class TestSealed:
    def test_single_reveal(self):
        s = SealedTestSet(np.ones((3, 2)), np.array([0, 1, 0]))
        X, y = s.reveal("first")
        with pytest.raises(TestSetAccessError):
            s.reveal("second")
        with pytest.raises(ValueError):
            X[0, 0] = 5
        assert s.intact() and s.access_log == ["first"]

    def test_copy_isolated_from_source(self):
        src = np.zeros((2, 2))
        s = SealedTestSet(src, np.array([0, 1]))
        src[0, 0] = 9
        assert s.intact()


class TestRunPreset:
    @pytest.mark.parametrize("name", list(PRESETS))
    def test_hygiene(self, matrix, name):
        train, test = split(matrix.labels, pipeline.SplitPlan(seed=1))
        before = data_digest(matrix.X[test], matrix.labels[test])
        run = run_preset(matrix, PRESETS[name], train, test, seed=3, forest_hp=FAST_FOREST, boost_hp=FAST_BOOST)
        assert data_digest(matrix.X[test], matrix.labels[test]) == before
        assert run.test.intact() and run.test.access_log == ["evaluate"]
        stages = [s for s, _ in run.trace]
        assert stages[-1] == "evaluate" and stages.count("evaluate") == 1
        # every stage before evaluation saw training rows only
        train_digest = run.trace[0][1]
        for _, digest in run.trace[1:-1]:
            assert digest != run.test.digest
        if PRESETS[name].use_pt:
            assert run.transform.fitted_rows == len(train)
            assert run.transform.fitted_digest == train_digest
        if PRESETS[name].use_rote:
            n0, n1 = run.train_class_counts
            assert n0 == n1
        assert run.metrics is not None
        if PRESETS[name].learner == "logistic":
            assert AGE_REFERENCE not in run.columns

    def test_model1_threshold_fixed(self, matrix):
        train, test = split(matrix.labels, pipeline.SplitPlan(seed=1))
        assert run_preset(matrix, PRESETS["model1"], train, test, seed=0).threshold == 0.5


class TestExperiment:
    def test_deterministic_report(self, small_corpus, codemap):
        store, _ = small_corpus
        a = run_experiment(store, codemap, fast_config(seed=5)).report()
        b = run_experiment(store, codemap, fast_config(seed=5)).report()
        assert a == b and len(a.splitlines()) == 1 + len(PRESETS)

    def test_workers_identical(self, small_corpus, codemap):
        store, _ = small_corpus
        a = run_experiment(store, codemap, fast_config(seed=5), workers=1).report()
        b = run_experiment(store, codemap, fast_config(seed=5), workers=8).report()
        assert a == b

    def test_adding_preset_does_not_perturb_others(self, matrix):
        one = run_on_matrix(matrix, fast_config(presets=("rf",)))
        two = run_on_matrix(matrix, fast_config(presets=("model1", "rf")))
        assert one.entries[0] == two.entries[1]

    def test_failure_rows(self, matrix):
        tiny = pipeline.FeatureMatrix(matrix.column_names, matrix.X[:8], matrix.labels[:8], matrix.row_ids[:8],
                                      matrix.dynamic_columns)
        res = run_on_matrix(tiny, fast_config(presets=("model1", "rf")))
        assert [e.model for e in res.entries] == ["model1", "rf"]
        assert all(e.metrics is None and e.error.startswith("TooSmall") for e in res.entries)
        assert "TooSmall" in res.report()

    def test_per_preset_failure(self, matrix, monkeypatch):
        def broken(*a, **k):
            raise ValueError("forest exploded")

        monkeypatch.setattr(pipeline, "fit_forest", broken)
        res = run_on_matrix(matrix, fast_config(presets=("model2", "rf")))
        assert res.entries[0].error is None and res.entries[0].metrics is not None
        assert res.entries[1].error == "ValueError: forest exploded" and res.entries[1].metrics is None

    def test_config_validation(self):
        with pytest.raises(InvalidConfig):
            fast_config(presets=())
        with pytest.raises(InvalidConfig):
            ExperimentConfig("police_interaction", FlexibleWindowSpec(0, HOMELESS))
        with pytest.raises(ValidationError):
            fast_config(train_fraction=1.0)

    def test_from_dict(self):
        cfg = experiment_from_dict({
            "outcome": HOMELESS, "presets": ["model2"], "seed": 9,
            "cohort": {"mode": "fixed", "obs_start": "2013-04-01", "index_date": "2018-03-31",
                       "pred_end": "2020-03-31"},
            "forest": {"n_estimators": 10},
        })
        assert cfg.seed == 9 and cfg.cohort.mode == "fixed" and cfg.forest.n_estimators == 10
        assert cfg.thresholds == DEFAULT_THRESHOLDS
        with pytest.raises(InvalidConfig):
            experiment_from_dict({"outcome": HOMELESS, "forest": {"trees": 3}})
        with pytest.raises(InvalidConfig):
            experiment_from_dict({})


class TestSweep:
    def test_fixture_counts(self, fixture_store, codemap):
        rows = run_threshold_sweep(fixture_store, codemap, HOMELESS, [0])
        assert (rows[0].n_outcomes, rows[0].n_individuals) == (3, 4)
        assert rows[0].error.startswith("TooSmall")

    def test_nonincreasing(self, small_corpus, codemap):
        store, _ = small_corpus
        rows = run_threshold_sweep(store, codemap, HOMELESS, list(DEFAULT_THRESHOLDS))
        ind = [r.n_individuals for r in rows]
        out = [r.n_outcomes for r in rows]
        assert ind == sorted(ind, reverse=True) and out == sorted(out, reverse=True)
        assert all(r.metrics is not None for r in rows)

    def test_workers_identical(self, small_corpus, codemap):
        store, _ = small_corpus
        a = run_threshold_sweep(store, codemap, HOMELESS, [0, 360], workers=1)
        b = run_threshold_sweep(store, codemap, HOMELESS, [0, 360], workers=4)
        assert a == b

    def test_empty(self, fixture_store, codemap):
        with pytest.raises(ValidationError):
            run_threshold_sweep(fixture_store, codemap, HOMELESS, [])
