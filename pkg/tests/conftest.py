import time

import pytest

from plvo.synthetic_world import WorldConfig, get_profile
from plvo.training import line_training_worlds, train_matcher

POINT_WORLD = WorldConfig(n_points=150, n_lines=20)
LINE_PROFILES = ("daytime", "fog", "nighttime")
TRAIN_STEPS = 2000

_verdicts = []


def record_verdict(number, passed, detail):
    """Remember one acceptance outcome for the end-of-run summary."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _verdicts.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_verdicts):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_networks():
    """Point and line networks trained with the same settings as ``plvo train``.

    Returns ``(point_weights, line_weights, point_seconds)``.
    """
    t0 = time.perf_counter()
    point = train_matcher(POINT_WORLD, get_profile("daytime"), TRAIN_STEPS, kind="point", seed=0)
    point_seconds = time.perf_counter() - t0
    line = train_matcher(line_training_worlds(), [get_profile(n) for n in LINE_PROFILES],
                         TRAIN_STEPS, kind="line", seed=1000)
    return point.weights, line.weights, point_seconds
