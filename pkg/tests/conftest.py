import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from esmoe.train import TrainConfig, matched_baseline, train  # noqa: E402

SEEDS = (1, 2, 3)

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test belongs to")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n, title = marker.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "tests": 0})
    if call.when == "call":
        entry["tests"] += 1
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {e['title']} ({e['tests']} test{'s' if e['tests'] != 1 else ''})")


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    """Default-config training runs for the fixed seed triple, each written to disk."""
    root = tmp_path_factory.mktemp("runs")
    return {s: train(TrainConfig(seed=s), out_dir=root / f"esmoe-{s}") for s in SEEDS}


@pytest.fixture(scope="session")
def baseline_runs():
    return {s: train(matched_baseline(TrainConfig(seed=s)), heatmaps=0) for s in SEEDS}


@pytest.fixture(scope="session")
def no_lb_runs():
    return {s: train(TrainConfig(seed=s, lb_weight=0.0)) for s in SEEDS}
