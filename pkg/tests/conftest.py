from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# acceptance verdicts, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def verdict():
    """Record one acceptance line; the caller still asserts."""

    def record(name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append((name, passed, detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    n = sum(p for _, p, _ in ACCEPTANCE)
    terminalreporter.write_line(f"{n}/{len(ACCEPTANCE)} criteria pass")
