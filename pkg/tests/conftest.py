import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


_ACCEPTANCE = []


@pytest.fixture
def verdict(request):
    """Record ``verdict(n, name, ok, detail)``; lines are printed at the end of the session."""
    def record(n, name, ok, detail=""):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        _ACCEPTANCE.append((n, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
