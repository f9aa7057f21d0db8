from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TWO_ATOM = [(-1.0, 0.5), (1.0, 0.5)]
THREE_ATOM = [(-1.0, 0.25), (0.0, 0.5), (1.0, 0.25)]
FIVE_ATOM = [(x, 0.2) for x in (-1.0, -0.5, 0.0, 0.5, 1.0)]
MEASURES = {"two-atom": TWO_ATOM, "three-atom": THREE_ATOM, "uniform-5": FIVE_ATOM}

_RUNS: dict = {}
ACCEPTANCE: dict[int, list] = {}


def cached_run(name: str, N: int, pivot: str = "bland", **kw):
    """Solve once per session; acceptance and module tests share the results."""
    from kcave.pipeline import RunConfig, solve_run

    key = (name, N, pivot, tuple(sorted(kw.items())))
    if key not in _RUNS:
        _RUNS[key] = solve_run(RunConfig(atoms=MEASURES[name], grid_n=N, pivot=pivot, **kw))
    return _RUNS[key]


def record(criterion: int, ok: bool, detail: str) -> None:
    """Collect one check; the summary line of a criterion passes only if all its checks do."""
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[k]
        ok = all(c for c, _ in checks)
        shown = [d for c, d in checks if not c] or [d for _, d in checks]
        terminalreporter.write_line(
            f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(shown))


@pytest.fixture
def run():
    return cached_run
