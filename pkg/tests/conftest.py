import pytest

VERDICTS: dict[int, str] = {}


def record_verdict(number: int, passed: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
