from datetime import date
from pathlib import Path

import pytest

from flexcohort import synth
from flexcohort.codemap import load_codemap
from flexcohort.events import build_store

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def codemap():
    return load_codemap()


@pytest.fixture(scope="session")
def fixture_store():
    persons, events = synth.four_person_fixture()
    return build_store(persons, events, synth.FIXTURE_DATE_RANGE)


def small_config(n=2000, intercept=-9.0, **kw):
    cats = [
        synth.CategorySpec("substance_use", 0.2, 2.0),
        synth.CategorySpec("mood_disorder", 0.25, 3.0),
        synth.CategorySpec("anxiety_disorder", 0.2, 2.0),
        synth.CategorySpec("psychiatrist_visits", 0.3, 2.0),
    ]
    beta = kw.pop("beta", {"substance_use": 1.5, "sex_male": 0.5})
    return synth.SynthConfig(n, (date(2013, 4, 1), date(2020, 3, 31)), cats, beta, intercept,
                             "homelessness", **kw)


@pytest.fixture(scope="session")
def small_corpus(codemap):
    cfg = small_config()
    persons, table, truth = synth.generate(cfg, 7, codemap)
    return build_store(persons, table, cfg.date_range), truth


# acceptance criteria: one PASS/FAIL line each in the terminal summary
_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    ok = _CRITERIA.get(number, (title, True))[1] and rep.passed
    _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title}")
