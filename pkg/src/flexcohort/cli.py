"""Command-line entry point: ``flexcohort <subcommand> ...``.

Exit status is 0 on success, 1 on bad input or usage, 2 on internal errors.
Data goes to files or standard output; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, _rng, synth
from ._format import render
from .codemap import load_codemap
from .cohort import DEFAULT_THRESHOLDS, FixedWindowSpec, FlexibleWindowSpec, read_cohort_csv, sweep_thresholds
from .ensembles import BoostHyperparams, TreeHyperparams, model_to_json
from .errors import ValidationError
from .evaluation import ComparisonEntry, comparison_report, sweep_report
from .events import build_store, events_csv, load_store, parse_date, persons_csv
from .featurize import (
    AGE_REFERENCE,
    DICHOTOMOUS,
    MULTIVARIABLE,
    FeatureSpec,
    describe,
    featurize,
    read_features_csv,
    render_summary,
)
from .glm import aliased_columns, fit_logistic, forward_select, odds_report, odds_table, univariate_screen
from .pipeline import (
    PRESET_NAMES,
    ExperimentConfig,
    build_cohort,
    get_preset,
    load_experiment_config,
    run_experiment,
    run_preset,
    run_threshold_sweep,
)
from .preprocess import SplitPlan, split

log = logging.getLogger("flexcohort")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
        log.info("wrote %s", out)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _date(text: str):
    try:
        return parse_date(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _store(args):
    return load_store(args.persons, args.events)


def _codemap(args):
    return load_codemap(args.codemap)


def _cohort_spec(args):
    if args.mode == "fixed":
        missing = [f for f in ("obs_start", "index_date", "pred_end") if getattr(args, f) is None]
        if missing:
            raise UsageError("fixed mode needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
        return FixedWindowSpec(args.obs_start, args.index_date, args.pred_end, args.outcome)
    return FlexibleWindowSpec(args.min_history, args.outcome)


def _hp_overrides(args) -> tuple[TreeHyperparams, BoostHyperparams]:
    forest, boost = TreeHyperparams(), BoostHyperparams()
    if getattr(args, "forest_trees", None):
        forest = TreeHyperparams(**{**forest.__dict__, "n_estimators": args.forest_trees})
    if getattr(args, "boost_stages", None):
        boost = BoostHyperparams(**{**boost.__dict__, "n_estimators": args.boost_stages})
    return forest, boost


# ---------------------------------------------------------------- subcommands

def cmd_fixture(args) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    persons, evs = synth.four_person_fixture()
    store = build_store(persons, evs, synth.FIXTURE_DATE_RANGE)
    (out / "persons.csv").write_text(persons_csv(persons, synth.FIXTURE_DATE_RANGE), encoding="utf-8", newline="\n")
    (out / "events.csv").write_text(events_csv(store.person_ids, store), encoding="utf-8", newline="\n")


def _synth_paths(args) -> tuple[Path, Path, Path | None]:
    base = Path(args.out_dir) if args.out_dir else None
    persons = args.out_persons or (base / "persons.csv" if base else None)
    events = args.out_events or (base / "events.csv" if base else None)
    truth = args.out_truth or (base / "truth.json" if base else None)
    if persons is None or events is None:
        raise UsageError("synth needs --out-dir or both --out-persons and --out-events")
    for path in (persons, events, truth):
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
    return Path(persons), Path(events), Path(truth) if truth else None


def cmd_synth(args) -> None:
    cfg = synth.load_synth_config(args.config)
    if args.n_persons is not None:
        cfg.n_persons = args.n_persons
    persons_path, events_path, truth_path = _synth_paths(args)
    persons, table, truth = synth.generate(cfg, args.seed, _codemap(args))
    store = build_store(persons, table, cfg.date_range)
    persons_path.write_text(persons_csv(persons, cfg.date_range), encoding="utf-8", newline="\n")
    events_path.write_text(events_csv(store.person_ids, store), encoding="utf-8", newline="\n")
    if truth_path is not None:
        truth_path.write_text(truth.to_json(), encoding="utf-8", newline="\n")


def cmd_cohort_build(args) -> None:
    cohort = build_cohort(_store(args), _codemap(args), _cohort_spec(args))
    log.info("%d members, %d positive", cohort.n_members, cohort.n_positive)
    _write(cohort.to_csv(), args.out)


def cmd_cohort_counts(args) -> None:
    rows = sweep_thresholds(_store(args), _codemap(args), args.outcome, args.thresholds)
    _write(render(["MRLT", "Num-Out", "Num-ind"], [[r.threshold, r.n_positive, r.n_members] for r in rows],
                  args.format), args.out)


def cmd_featurize(args) -> None:
    store, cm = _store(args), _codemap(args)
    cohort = read_cohort_csv(args.cohort)
    cats = tuple(args.categories) if args.categories else tuple(cm.feature_categories)
    matrix = featurize(store, cohort, cm, FeatureSpec(cats, mode=args.mode))
    _write(matrix.to_csv(), args.out)


def cmd_describe(args) -> None:
    matrix = read_features_csv(args.features)
    _write(render_summary(describe(matrix), matrix.labels, args.format), args.out)


def cmd_odds(args) -> None:
    m = read_features_csv(args.features)
    if AGE_REFERENCE in m.column_names:
        m = m.drop([AGE_REFERENCE])
    uni = univariate_screen(m.X, m.labels, m.column_names)
    m = m.drop([m.column_names[j] for j in aliased_columns(m.X)])
    if args.select:
        adjusted = odds_table(forward_select(m.X, m.labels, m.column_names).model)
    else:
        adjusted = odds_table(fit_logistic(m.X, m.labels, m.column_names))
    _write(odds_report(uni, adjusted, args.format), args.out)


def cmd_fit(args) -> None:
    matrix = read_features_csv(args.features)
    preset = get_preset(args.preset)
    train, test = split(matrix.labels, SplitPlan(args.train_fraction, _rng.sub_seed(args.seed, "split")))
    forest, boost = _hp_overrides(args)
    run = run_preset(matrix, preset, train, test, _rng.sub_seed(args.seed, f"preset/{preset.name}"),
                     forest, boost, workers=args.workers)
    if args.model_out:
        if preset.learner == "logistic":
            text = json.dumps({"format_version": 1, **run.model.to_dict()}, sort_keys=True) + "\n"
        else:
            text = model_to_json(run.model)
        Path(args.model_out).write_text(text, encoding="utf-8", newline="\n")
    entry = ComparisonEntry(preset.name, run.metrics, int(matrix.labels.sum()), matrix.n_rows)
    _write(comparison_report([entry], args.format), args.out)


def cmd_sweep(args) -> None:
    entries = run_threshold_sweep(_store(args), _codemap(args), args.outcome, args.thresholds, args.preset,
                                  args.seed, args.train_fraction, workers=args.workers)
    _write(sweep_report(entries, args.format), args.out)


def cmd_compare(args) -> None:
    if args.config:
        cfg = load_experiment_config(args.config, seed=args.seed)
    else:
        if not args.outcome:
            raise UsageError("compare needs --config or --outcome")
        forest, boost = _hp_overrides(args)
        cfg = ExperimentConfig(args.outcome, _cohort_spec(args), tuple(args.presets or PRESET_NAMES), args.seed,
                               args.train_fraction, forest=forest, boost=boost)
    result = run_experiment(_store(args), _codemap(args), cfg, workers=args.workers)
    _write(result.report(args.format), args.out)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 42)")
    g.add_argument("--format", choices=("csv", "text"), default=argparse.SUPPRESS, help="report format (default csv)")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging on stderr")
    g.add_argument("--workers", type=_positive, default=argparse.SUPPRESS, help="worker threads (default 1)")
    g.add_argument("--codemap", default=argparse.SUPPRESS, help="codemap file (default: bundled)")

    p = _Parser(prog="flexcohort", description="Cohort construction and outcome modelling on administrative records.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.set_defaults(seed=42, format="csv", verbose=0, workers=1, codemap=None)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def store_args(sp):
        sp.add_argument("--persons", required=True, help="persons.csv")
        sp.add_argument("--events", required=True, help="events.csv")

    def cohort_args(sp, required_outcome=True):
        sp.add_argument("--outcome", required=required_outcome, help="outcome category, e.g. homelessness")
        sp.add_argument("--mode", choices=("fixed", "flexible"), default="flexible")
        sp.add_argument("--obs-start", type=_date)
        sp.add_argument("--index-date", "--index", dest="index_date", type=_date)
        sp.add_argument("--pred-end", type=_date)
        sp.add_argument("--min-history", type=int, default=0, help="minimum history days (flexible mode)")

    def out_arg(sp):
        sp.add_argument("--out", help="output file (default stdout)")

    def hp_args(sp):
        sp.add_argument("--forest-trees", type=_positive, help="override forest n_estimators")
        sp.add_argument("--boost-stages", type=_positive, help="override boosting n_estimators")
        sp.add_argument("--train-fraction", type=float, default=0.9)

    sp = sub.add_parser("fixture", parents=[common], help="write the four-person illustration corpus")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_fixture)

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus from a TOML config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--n-persons", type=int)
    sp.add_argument("--out-dir", help="write persons.csv, events.csv and truth.json here")
    sp.add_argument("--out-persons")
    sp.add_argument("--out-events")
    sp.add_argument("--out-truth")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("cohort", parents=[common], help="build cohorts or count them by threshold")
    csub = sp.add_subparsers(dest="cohort_command", metavar="action", parser_class=_Parser)
    csub.required = True
    b = csub.add_parser("build", parents=[common], help="write cohort.csv")
    store_args(b), cohort_args(b), out_arg(b)
    b.set_defaults(func=cmd_cohort_build)
    c = csub.add_parser("counts", parents=[common], help="members and positives per minimum-history threshold")
    store_args(c), out_arg(c)
    c.add_argument("--outcome", required=True)
    c.add_argument("--thresholds", type=_int_list, default=list(DEFAULT_THRESHOLDS))
    c.set_defaults(func=cmd_cohort_counts)

    sp = sub.add_parser("featurize", parents=[common], help="write the feature matrix for a cohort")
    store_args(sp), out_arg(sp)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--mode", choices=(MULTIVARIABLE, DICHOTOMOUS), default=MULTIVARIABLE)
    sp.add_argument("--categories", type=_csv_list)
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("describe", parents=[common], help="summary table of a feature matrix by outcome")
    sp.add_argument("--features", required=True)
    out_arg(sp)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("odds", parents=[common], help="univariate and adjusted odds ratios")
    sp.add_argument("--features", required=True)
    sp.add_argument("--select", action="store_true", help="adjusted model by forward selection")
    out_arg(sp)
    sp.set_defaults(func=cmd_odds)

    sp = sub.add_parser("fit", parents=[common], help="train and test one preset on a feature matrix")
    sp.add_argument("--features", required=True)
    sp.add_argument("--preset", choices=PRESET_NAMES, default="model2")
    sp.add_argument("--model-out")
    hp_args(sp), out_arg(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("sweep", parents=[common], help="one experiment per minimum-history threshold")
    store_args(sp), out_arg(sp)
    sp.add_argument("--outcome", required=True)
    sp.add_argument("--thresholds", type=_int_list, default=list(DEFAULT_THRESHOLDS))
    sp.add_argument("--preset", choices=PRESET_NAMES, default="model2")
    sp.add_argument("--train-fraction", type=float, default=0.9)
    sp.set_defaults(func=cmd_sweep)

    for name, aliases in (("compare", ["run"]),):
        sp = sub.add_parser(name, aliases=aliases, parents=[common], help="run model presets side by side")
        store_args(sp), out_arg(sp), hp_args(sp)
        cohort_args(sp, required_outcome=False)
        sp.add_argument("--config", help="experiment TOML (overrides cohort flags)")
        sp.add_argument("--presets", type=_csv_list)
        sp.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"flexcohort: error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, OSError) as exc:
        print(f"flexcohort: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defect path
        log.debug("internal error", exc_info=True)
        print(f"flexcohort: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
