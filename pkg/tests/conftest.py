from __future__ import annotations

import re
from pathlib import Path

import pytest

from scapolite_ci.automation import load_policy_catalog
from scapolite_ci.guide import load_guide
from scapolite_ci.rulepack import build_rulepack

FIXTURES = Path(__file__).parent / "fixtures"
GUIDE_DIR = FIXTURES / "guide"
CATALOG_PATH = FIXTURES / "catalog.yml"
TARGETS_DIR = FIXTURES / "targets"
SPECS_DIR = FIXTURES / "specs"


@pytest.fixture(scope="session")
def catalog():
    return load_policy_catalog(CATALOG_PATH.read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def guide():
    return load_guide(GUIDE_DIR)


@pytest.fixture(scope="session")
def full_rulepack(guide, catalog):
    return build_rulepack(guide, None, catalog)


@pytest.fixture(scope="session")
def rulepack_for(guide, catalog):
    cache = {}

    def factory(profile_id):
        if profile_id not in cache:
            cache[profile_id] = build_rulepack(guide, profile_id, catalog)
        return cache[profile_id]

    return factory


# -- acceptance criteria report ---------------------------------------------

_CRITERION_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_criteria: dict[int, tuple[str, bool]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION_RE.search(report.nodeid)
    if not m:
        return
    number, name = int(m.group(1)), m.group(2).replace("_", " ")
    failed = report.failed
    if report.when == "call" or failed:
        previous = _criteria.get(number, (name, True))[1]
        _criteria[number] = (name, previous and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        name, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {name}")
