import subprocess
import sys
from pathlib import Path

import pytest

from flexcohort.cli import main

ROOT = Path(__file__).resolve().parent.parent
DATA = Path(__file__).parent / "data" / "four_person"

SYNTH_TOML = """\
n_persons = 1500
start = "2013-04-01"
end = "2020-03-31"
outcome_category = "homelessness"
intercept = -9.0

[[category]]
name = "substance_use"
prevalence = 0.2
events_per_year = 2.0

[[category]]
name = "mood_disorder"
prevalence = 0.25
events_per_year = 3.0

[true_beta]
substance_use = 1.5
sex_male = 0.5
"""


def run_all(d: Path, workers: int) -> dict[str, bytes]:
    """Every subcommand once, writing into ``d``; returns the produced files."""
    (d / "synth.toml").write_text(SYNTH_TOML)
    w = ["--workers", str(workers), "--seed", "11"]
    store = ["--persons", str(d / "corpus/persons.csv"), "--events", str(d / "corpus/events.csv")]
    fixed = ["--mode", "fixed", "--obs-start", "2013-04-01", "--index", "2018-03-31", "--pred-end", "2020-03-31"]
    commands = [
        ["fixture", "--out-dir", str(d / "fixture")],
        ["synth", "--config", str(d / "synth.toml"), "--out-dir", str(d / "corpus")],
        ["cohort", "build", *store, "--outcome", "homelessness", "--min-history", "90", "--out", str(d / "cohort.csv")],
        ["cohort", "build", *store, "--outcome", "homelessness", *fixed, "--out", str(d / "fixed.csv")],
        ["cohort", "counts", *store, "--outcome", "homelessness", "--out", str(d / "counts.csv")],
        ["featurize", *store, "--cohort", str(d / "cohort.csv"), "--out", str(d / "features.csv")],
        ["describe", "--features", str(d / "features.csv"), "--out", str(d / "describe.csv")],
        ["odds", "--features", str(d / "features.csv"), "--out", str(d / "odds.csv")],
        ["odds", "--features", str(d / "features.csv"), "--select", "--out", str(d / "odds_sel.csv")],
        ["fit", "--features", str(d / "features.csv"), "--preset", "rf", "--forest-trees", "30",
         "--model-out", str(d / "rf.json"), "--out", str(d / "fit_rf.csv")],
        ["fit", "--features", str(d / "features.csv"), "--preset", "boost", "--boost-stages", "40",
         "--model-out", str(d / "boost.json"), "--out", str(d / "fit_boost.csv")],
        ["fit", "--features", str(d / "features.csv"), "--preset", "model3", "--model-out", str(d / "lr.json"),
         "--out", str(d / "fit_lr.csv")],
        ["sweep", *store, "--outcome", "homelessness", "--thresholds", "0,30,60,90,180,360,720",
         "--out", str(d / "sweep.csv")],
        ["compare", *store, "--outcome", "homelessness", "--min-history", "0", "--forest-trees", "20",
         "--boost-stages", "30", "--out", str(d / "compare.csv")],
    ]
    for c in commands:
        assert main(c + w) == 0, c
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    runs = {}
    for name, workers in (("a", 1), ("b", 1), ("c", 8)):
        d = tmp_path_factory.mktemp(name)
        runs[name] = run_all(d, workers)
    return runs


def test_repeat_runs_identical(outputs):
    assert outputs["a"].keys() == outputs["b"].keys()
    for k in outputs["a"]:
        assert outputs["a"][k] == outputs["b"][k], k


def test_worker_count_identical(outputs):
    for k in outputs["a"]:
        assert outputs["a"][k] == outputs["c"][k], k


def test_sweep_has_seven_rows(outputs):
    lines = outputs["a"]["sweep.csv"].decode().splitlines()
    assert lines[0].startswith("f1,AUC,Sen,Prec,MRLT,Num-Out,Num-ind") and len(lines) == 8


def test_lf_line_endings(outputs):
    assert all(b"\r\n" not in v for v in outputs["a"].values())


def test_fixture_matches_shipped_files(outputs):
    assert outputs["a"]["fixture/persons.csv"] == (DATA / "persons.csv").read_bytes()
    assert outputs["a"]["fixture/events.csv"] == (DATA / "events.csv").read_bytes()


def test_fixture_fixed_cohort(tmp_path, capsys):
    assert main(["cohort", "build", "--persons", str(DATA / "persons.csv"), "--events", str(DATA / "events.csv"),
                 "--outcome", "homelessness", "--mode", "fixed", "--obs-start", "2013-04-01",
                 "--index-date", "2018-03-31", "--pred-end", "2020-03-31"]) == 0
    lines = capsys.readouterr().out.splitlines()
    # observation starts at the later of the requested start and the first record
    assert lines[1:] == ["P1,positive,2014-02-10,2018-03-31,1510,", "P2,,,,,outcome_before_index",
                         "P3,negative,2013-06-15,2018-03-31,1750,", "P4,,,,,outcome_before_index"]


def test_fixture_sweep_counts(capsys):
    assert main(["sweep", "--persons", str(DATA / "persons.csv"), "--events", str(DATA / "events.csv"),
                 "--outcome", "homelessness", "--thresholds", "0"]) == 0
    row = capsys.readouterr().out.splitlines()[1].split(",")
    assert row[4:7] == ["0", "3", "4"]


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_bad_flag_named(self, capsys):
        assert main(["fixture", "--out-dir", "x", "--bogus"]) == 1
        assert "--bogus" in capsys.readouterr().err

    def test_bad_workers(self):
        assert main(["fixture", "--out-dir", "x", "--workers", "0"]) == 1

    def test_validation_error(self, tmp_path, capsys):
        (tmp_path / "p.csv").write_text("person_id,sex,birth_year\nA,Q,1980\n")
        (tmp_path / "e.csv").write_text("person_id,date,source,kind,code_system,code\n")
        rc = main(["cohort", "build", "--persons", str(tmp_path / "p.csv"), "--events", str(tmp_path / "e.csv"),
                   "--outcome", "homelessness"])
        assert rc == 1 and "SchemaError" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["describe", "--features", str(tmp_path / "nope.csv")]) == 1

    def test_fixed_mode_needs_dates(self, capsys):
        rc = main(["cohort", "build", "--persons", str(DATA / "persons.csv"), "--events", str(DATA / "events.csv"),
                   "--outcome", "homelessness", "--mode", "fixed"])
        assert rc == 1 and "--obs-start" in capsys.readouterr().err

    def test_internal_error(self, monkeypatch):
        import flexcohort.cli as cli

        def boom(args):
            raise RuntimeError("defect")

        monkeypatch.setattr(cli, "cmd_fixture", boom)
        assert main(["fixture", "--out-dir", "x"]) == 2

    def test_help(self, capsys):
        assert main(["compare", "--help"]) == 0
        out = capsys.readouterr().out
        for flag in ("--config", "--presets", "--seed", "--workers", "--format"):
            assert flag in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flexcohort", "fixture", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True, cwd=ROOT)
    assert proc.returncode == 0 and (tmp_path / "events.csv").exists()
    proc = subprocess.run([sys.executable, "-m", "flexcohort", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stdout == ""


def test_example_configs_parse():
    from flexcohort.pipeline import load_experiment_config
    from flexcohort.synth import load_synth_config

    assert load_synth_config(ROOT / "configs" / "synth_example.toml").n_persons == 5000
    assert load_experiment_config(ROOT / "configs" / "experiment_example.toml").cohort.min_history_days == 360
