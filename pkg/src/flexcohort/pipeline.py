"""Preset experiments: cohort, features, split, train-only preprocessing, fit, calibrate, test once.

Five presets are defined as data in :data:`PRESETS`. All presets of one
experiment share a single train/test split; each gets its own model seed
derived from the master seed and its name, so adding a preset never changes
another preset's numbers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import _rng
from ._toml import load_toml
from .codemap import CodeMap
from .cohort import DEFAULT_THRESHOLDS, Cohort, FixedWindowSpec, FlexibleWindowSpec, build_fixed, build_flexible
from .ensembles import BoostHyperparams, TreeHyperparams, fit_boosted, fit_forest
from .errors import FlexCohortError, InvalidConfig, TestSetAccessError, ValidationError
from .evaluation import ComparisonEntry, MetricsRow, SweepEntry, comparison_report, metrics_at, youden_threshold
from .events import EventStore, parse_date
from .featurize import AGE_REFERENCE, DICHOTOMOUS, MULTIVARIABLE, FeatureMatrix, FeatureSpec, featurize
from .glm import aliased_columns, fit_logistic, predict_proba
from .preprocess import PowerTransform, SplitPlan, data_digest, random_oversample, split

FIXED_HALF = "fixed_half"
YOUDEN = "youden"


@dataclass(frozen=True)
class ModelPreset:
    name: str
    feature_mode: str
    use_pt: bool
    use_rote: bool
    calibration: str
    learner: str  # logistic | forest | boosted


PRESETS: dict[str, ModelPreset] = {
    "model1": ModelPreset("model1", DICHOTOMOUS, False, False, FIXED_HALF, "logistic"),
    "model2": ModelPreset("model2", DICHOTOMOUS, False, False, YOUDEN, "logistic"),
    "model3": ModelPreset("model3", MULTIVARIABLE, True, True, YOUDEN, "logistic"),
    "rf": ModelPreset("rf", MULTIVARIABLE, True, True, YOUDEN, "forest"),
    "boost": ModelPreset("boost", MULTIVARIABLE, True, True, YOUDEN, "boosted"),
}
PRESET_NAMES = tuple(PRESETS)


def get_preset(name: str) -> ModelPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


class SealedTestSet:
    """Held-out rows that can be revealed exactly once.

    The arrays are frozen read-only at construction and their digest recorded,
    so any later mutation or second read is detectable.
    """

    def __init__(self, X: np.ndarray, labels: np.ndarray):
        self._X = np.array(X, dtype=np.float64)
        self._y = np.array(labels, dtype=np.int8)
        self._X.setflags(write=False)
        self._y.setflags(write=False)
        self.digest = data_digest(self._X, self._y)
        self.access_log: list[str] = []

    @property
    def n_rows(self) -> int:
        return len(self._y)

    def reveal(self, purpose: str = "evaluate") -> tuple[np.ndarray, np.ndarray]:
        if self.access_log:
            raise TestSetAccessError(f"test set already revealed for {self.access_log[0]!r}")
        self.access_log.append(purpose)
        return self._X, self._y

    def intact(self) -> bool:
        return data_digest(self._X, self._y) == self.digest


@dataclass
class PresetRun:
    """Everything one preset produced, including a trace of which rows each stage saw."""

    preset: ModelPreset
    metrics: MetricsRow | None = None
    threshold: float | None = None
    model: Any = None
    transform: PowerTransform | None = None
    columns: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)
    trace: list[tuple[str, str]] = field(default_factory=list)
    train_class_counts: tuple[int, int] = (0, 0)
    test: SealedTestSet | None = None
    error: str | None = None


def _columns_for(preset: ModelPreset, matrix: FeatureMatrix) -> FeatureMatrix:
    m = matrix.dichotomize() if preset.feature_mode == DICHOTOMOUS else matrix
    # the reference age band is collinear with the intercept in a regression
    if preset.learner == "logistic" and AGE_REFERENCE in m.column_names:
        m = m.drop([AGE_REFERENCE])
    return m


def _fit(preset: ModelPreset, X: np.ndarray, y: np.ndarray, names: list[str], seed: int,
         forest_hp: TreeHyperparams, boost_hp: BoostHyperparams, workers: int):
    if preset.learner == "logistic":
        model = fit_logistic(X, y, names)
        return model, lambda Z: predict_proba(model, Z)
    if preset.learner == "forest":
        model = fit_forest(X, y, forest_hp, seed, names, workers=workers)
    else:
        model = fit_boosted(X, y, boost_hp, seed, names)
    return model, model.predict_proba


def run_preset(matrix: FeatureMatrix, preset: ModelPreset, train_rows: np.ndarray, test_rows: np.ndarray,
               seed: int, forest_hp: TreeHyperparams = TreeHyperparams(),
               boost_hp: BoostHyperparams = BoostHyperparams(), workers: int = 1,
               n_outcomes: int | None = None, n_individuals: int | None = None) -> PresetRun:
    """Train one preset on ``train_rows`` and evaluate it once on ``test_rows``.

    ``matrix`` holds raw (multivariable) counts; dichotomous presets threshold
    them here. Preprocessing order: power transform fitted on train, then
    oversampling of the transformed train rows. The decision threshold is
    chosen on the original (not oversampled) train rows.
    """
    run = PresetRun(preset)
    m = _columns_for(preset, matrix)
    if preset.learner == "logistic":
        # constant or collinear training columns have no estimable coefficient
        run.dropped = [m.column_names[j] for j in aliased_columns(m.X[train_rows])]
        m = m.drop(run.dropped)
    run.columns = list(m.column_names)
    X_train, y_train = m.X[train_rows], m.labels[train_rows]
    run.test = SealedTestSet(m.X[test_rows], m.labels[test_rows])
    run.trace.append(("split", data_digest(X_train)))

    if preset.use_pt:
        run.transform = PowerTransform().fit(X_train)
        run.trace.append(("pt_fit", run.transform.fitted_digest))
        X_train = run.transform.transform(X_train)
    X_fit, y_fit = X_train, y_train
    if preset.use_rote:
        X_fit, y_fit = random_oversample(X_train, y_train, _rng.sub_seed(seed, "rote"))
    run.train_class_counts = (int(np.sum(y_fit == 0)), int(np.sum(y_fit == 1)))
    run.trace.append(("model_fit", data_digest(X_fit)))

    run.model, score = _fit(preset, X_fit, y_fit, run.columns, seed, forest_hp, boost_hp, workers)
    if preset.calibration == YOUDEN:
        run.threshold, _ = youden_threshold(score(X_train), y_train)
        run.trace.append(("calibrate", data_digest(X_train)))
    else:
        run.threshold = 0.5

    X_test, y_test = run.test.reveal()
    if run.transform is not None:
        X_test = run.transform.transform(X_test)
    run.trace.append(("evaluate", run.test.digest))
    run.metrics = metrics_at(score(X_test), y_test, run.threshold, n_outcomes, n_individuals)
    return run


def _error_text(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


_RECOVERABLE = (FlexCohortError, ValueError, ArithmeticError, np.linalg.LinAlgError)


@dataclass
class ExperimentConfig:
    outcome: str
    cohort: FixedWindowSpec | FlexibleWindowSpec
    presets: tuple[str, ...] = PRESET_NAMES
    seed: int = 42
    train_fraction: float = 0.9
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS
    categories: tuple[str, ...] | None = None
    forest: TreeHyperparams = TreeHyperparams()
    boost: BoostHyperparams = BoostHyperparams()

    def __post_init__(self):
        self.presets = tuple(self.presets)
        if not self.presets:
            raise InvalidConfig("at least one preset is required")
        for p in self.presets:
            get_preset(p)
        if self.cohort.outcome_category != self.outcome:
            raise InvalidConfig("cohort outcome differs from experiment outcome")
        SplitPlan(self.train_fraction)

    @property
    def split_plan(self) -> SplitPlan:
        return SplitPlan(self.train_fraction, _rng.sub_seed(self.seed, "split"), True)

    def preset_seed(self, name: str) -> int:
        return _rng.sub_seed(self.seed, f"preset/{name}")


def _hp(cls, table: dict | None, default):
    if not table:
        return default
    valid = {f.name for f in fields(cls)}
    unknown = set(table) - valid
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return replace(default, **table)


def experiment_from_dict(d: dict, seed: int | None = None) -> ExperimentConfig:
    """Build a config from the TOML layout documented in the README."""
    try:
        outcome = d["outcome"]
        c = d.get("cohort", {})
        mode = c.get("mode", "flexible")
        if mode == "fixed":
            spec = FixedWindowSpec(parse_date(str(c["obs_start"])), parse_date(str(c["index_date"])),
                                   parse_date(str(c["pred_end"])), outcome)
        elif mode == "flexible":
            spec = FlexibleWindowSpec(int(c.get("min_history_days", 0)), outcome)
        else:
            raise InvalidConfig(f"cohort mode must be fixed or flexible, not {mode!r}")
        return ExperimentConfig(
            outcome=outcome,
            cohort=spec,
            presets=tuple(d.get("presets", PRESET_NAMES)),
            seed=int(d.get("seed", 42) if seed is None else seed),
            train_fraction=float(d.get("train_fraction", 0.9)),
            thresholds=tuple(int(t) for t in d.get("thresholds", DEFAULT_THRESHOLDS)),
            categories=tuple(d["categories"]) if "categories" in d else None,
            forest=_hp(TreeHyperparams, d.get("forest"), TreeHyperparams()),
            boost=_hp(BoostHyperparams, d.get("boost"), BoostHyperparams()),
        )
    except KeyError as exc:
        raise InvalidConfig(f"missing config key {exc.args[0]!r}") from None
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None


def load_experiment_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    return experiment_from_dict(load_toml(path), seed)


def build_cohort(store: EventStore, codemap: CodeMap, spec: FixedWindowSpec | FlexibleWindowSpec) -> Cohort:
    if isinstance(spec, FixedWindowSpec):
        return build_fixed(store, codemap, spec)
    return build_flexible(store, codemap, spec)


@dataclass
class ExperimentResult:
    entries: list[ComparisonEntry]
    runs: dict[str, PresetRun]
    cohort: Cohort | None

    def report(self, fmt: str = "csv") -> str:
        return comparison_report(self.entries, fmt)


def _map_ordered(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def run_on_matrix(matrix: FeatureMatrix, config: ExperimentConfig, workers: int = 1,
                  n_outcomes: int | None = None, n_individuals: int | None = None) -> ExperimentResult:
    n_out = int(matrix.labels.sum()) if n_outcomes is None else n_outcomes
    n_ind = matrix.n_rows if n_individuals is None else n_individuals
    try:
        train, test = split(matrix.labels, config.split_plan)
    except _RECOVERABLE as exc:
        err = _error_text(exc)
        entries = [ComparisonEntry(p, None, n_out, n_ind, err) for p in config.presets]
        return ExperimentResult(entries, {}, None)

    def one(name: str):
        try:
            return run_preset(matrix, PRESETS[name], train, test, config.preset_seed(name), config.forest,
                              config.boost, workers=1, n_outcomes=n_out, n_individuals=n_ind)
        except _RECOVERABLE as exc:
            return PresetRun(PRESETS[name], error=_error_text(exc))

    runs = _map_ordered(one, list(config.presets), workers)
    entries = [ComparisonEntry(r.preset.name, r.metrics, n_out, n_ind, r.error) for r in runs]
    return ExperimentResult(entries, {r.preset.name: r for r in runs}, None)


def run_experiment(store: EventStore, codemap: CodeMap, config: ExperimentConfig,
                   workers: int = 1) -> ExperimentResult:
    """Build the cohort, featurize it and run every preset; one report row per preset."""
    cohort = build_cohort(store, codemap, config.cohort)
    cats = config.categories or tuple(codemap.feature_categories)
    n_out, n_ind = cohort.n_positive, cohort.n_members
    try:
        matrix = featurize(store, cohort, codemap, FeatureSpec(cats))
    except _RECOVERABLE as exc:
        err = _error_text(exc)
        entries = [ComparisonEntry(p, None, n_out, n_ind, err) for p in config.presets]
        return ExperimentResult(entries, {}, cohort)
    result = run_on_matrix(matrix, config, workers, n_out, n_ind)
    result.cohort = cohort
    return result


def run_threshold_sweep(store: EventStore, codemap: CodeMap, outcome: str,
                        thresholds: Sequence[int] = DEFAULT_THRESHOLDS, preset: str = "model2",
                        seed: int = 42, train_fraction: float = 0.9,
                        categories: Sequence[str] | None = None, workers: int = 1) -> list[SweepEntry]:
    """One full experiment per minimum-history threshold, in the given order.

    Outcome and individual counts are those of the cohort at each threshold.
    """
    if not thresholds:
        raise ValidationError("thresholds must be non-empty")
    get_preset(preset)

    def one(t: int) -> SweepEntry:
        cfg = ExperimentConfig(outcome, FlexibleWindowSpec(int(t), outcome), (preset,), seed, train_fraction,
                               categories=tuple(categories) if categories else None)
        res = run_experiment(store, codemap, cfg)
        e = res.entries[0]
        return SweepEntry(int(t), e.metrics, e.n_outcomes, e.n_individuals, e.error)

    return _map_ordered(one, [int(t) for t in thresholds], workers)
