import pytest

from pdscale.velocity import load_profile

# (criterion number, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda row: row[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def llama():
    return load_profile("llama-3.1-8b")


@pytest.fixture(scope="session")
def qwen():
    return load_profile("qwen-2.5-32b")
