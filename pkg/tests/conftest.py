from __future__ import annotations

from pathlib import Path

import pytest

from floodvision.cli import default_kg_path
from floodvision.kg import load_kg

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (description, passed)
ACCEPTANCE: dict[str, tuple[str, bool]] = {}


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def shipped_kg():
    return load_kg(default_kg_path().read_bytes())


@pytest.fixture(scope="session")
def match_kg():
    return load_kg((FIXTURES / "match_kg.json").read_bytes())


@pytest.fixture
def golden_dir() -> Path:
    return FIXTURES / "golden"


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for the acceptance criterion named by the test's marker."""
    marker = request.node.get_closest_marker("criterion")
    key, text = marker.args
    yield
    failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else True
    ACCEPTANCE[key] = (text, not failed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key, text): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: [int(p) if p.isdigit() else p for p in k.replace(".", " ").split()]):
        text, ok = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {text}")
