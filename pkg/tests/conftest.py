import contextlib

import numpy as np
import pytest

from frustumfuse.geometry import CameraModel
from frustumfuse.selftest import random_box, random_camera  # noqa: F401


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def simple_cam():
    """K = diag(100, 100, 1) with the principal point at the origin, identity pose."""
    return CameraModel(np.diag([100.0, 100.0, 1.0]), np.eye(3), np.zeros(3), 640, 480)


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def check(self, ok, message):
        if not ok:
            raise AssertionError(message)


_VERDICTS = []


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    @contextlib.contextmanager
    def record(number, title):
        c = _Criterion(number, title)
        try:
            yield c
        except BaseException as exc:
            line = f"FAIL criterion {number}: {title}: {exc}".splitlines()[0]
            _VERDICTS.append(line)
            print(line)
            raise
        line = f"PASS criterion {number}: {title}" + (f" ({c.detail})" if c.detail else "")
        _VERDICTS.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
