import time

import pytest

_LINES = pytest.StashKey[list]()


class Criterion:
    def __init__(self, lines: list, number: int, title: str):
        self.lines = lines
        self.number = number
        self.title = title
        self.t0 = time.perf_counter()
        self.done = False

    def check(self, ok: bool, detail: str, limit_s: float | None = None) -> None:
        runtime = time.perf_counter() - self.t0
        if limit_s is not None and runtime >= limit_s:
            ok = False
            detail += f"; over the {limit_s:g} s budget"
        self._emit(ok, f"{detail}; {runtime:.2f} s")
        assert ok, f"criterion {self.number} failed: {detail}"

    def _emit(self, ok: bool, detail: str) -> None:
        self.done = True
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number:>2} {self.title}: {detail}"
        self.lines.append((self.number, line))
        print(line)


@pytest.fixture
def criterion(request):
    """Factory for one acceptance criterion; reports FAIL if the test raises before checking."""
    lines = request.config.stash.setdefault(_LINES, [])
    made: list[Criterion] = []

    def start(number: int, title: str) -> Criterion:
        c = Criterion(lines, number, title)
        made.append(c)
        return c

    yield start
    for c in made:
        if not c.done:
            c._emit(False, "raised before its check")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
