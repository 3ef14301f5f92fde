import time

import pytest

from gesturedim import lifter as L
from gesturedim import synth_data as S


@pytest.fixture(scope="session")
def invertible_split():
    ds = S.generate(S.SynthConfig(num_sequences=1536, ambiguity_mode="none"), seed=21)
    return S.split(ds, 2 / 3, seed=21)


# wall time spent building the shared lifter fixtures, for runtime budgets
FIXTURE_SECONDS: dict[str, float] = {}


def _timed(name, fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    FIXTURE_SECONDS[name] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def invertible_lifter(invertible_split):
    return _timed("invertible_lifter", L.train_lifter, invertible_split[0], L.LifterConfig(seed=5))


@pytest.fixture(scope="session")
def mirror_pair_split():
    ds = S.generate(S.SynthConfig(num_sequences=768, ambiguity_mode="mirror", ambiguity_mix=0.5), seed=22)
    train, test = S.split(ds, 2 / 3, seed=22)
    return S.with_mirror_pairs(train), test


@pytest.fixture(scope="session")
def mirror_pair_lifter(mirror_pair_split):
    return _timed("mirror_pair_lifter", L.train_lifter, mirror_pair_split[0], L.LifterConfig(seed=6))


_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[name]
        status = "PASS" if outcome == "passed" else "FAIL" if outcome == "failed" else outcome.upper()
        terminalreporter.write_line(f"{status:5s} {name}{': ' + detail if detail else ''}")
