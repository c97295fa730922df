import pytest

# criterion number -> (title, passed, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def criterion(request):
    """Record one criterion's verdict; the test fails if any check fails."""

    class Recorder:
        def __init__(self):
            self.checks: list[tuple[str, bool]] = []

        def check(self, label: str, ok) -> None:
            self.checks.append((label, bool(ok)))

        def finish(self, n: int, title: str) -> None:
            ok = all(passed for _, passed in self.checks)
            failed = [label for label, passed in self.checks if not passed]
            detail = "; ".join(label for label, _ in self.checks) if ok else "failed: " + "; ".join(failed)
            CRITERIA[n] = (title, ok, detail)
            print(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
            assert ok, f"criterion {n} failed: {'; '.join(failed)}"

    return Recorder()
