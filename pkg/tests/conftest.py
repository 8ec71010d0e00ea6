import pytest

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record(number: int, passed: bool | None, detail: str) -> str:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"criterion {number:2d}: {status}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return line


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
