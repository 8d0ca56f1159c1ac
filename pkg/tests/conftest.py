import pytest

TITLES = {
    1: "threshold anchors",
    2: "threshold minimizes the scalar objective",
    3: "gradient operator anchors",
    4: "descent and step energy",
    5: "fixation and gap separation",
    6: "limits are fixed points and local minima",
    7: "global minimizers are isolated fixed points",
    8: "one-sided optimality of iterative limits",
    9: "post-fixation contraction rate",
    10: "2D constraint preservation and convergence",
    11: "basin structure",
    12: "selftest determinism",
}

_results: dict = {}


class _Recorder:
    def __call__(self, number: int, passed: bool, detail: str) -> None:
        _results.setdefault(number, []).append((bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def criterion():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in TITLES.items():
        parts = _results.get(number)
        if parts is None:
            terminalreporter.write_line(f"[----] {number:2d}. {title}: not run")
            continue
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
