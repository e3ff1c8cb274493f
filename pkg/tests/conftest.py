import numpy as np
import pytest

from sonarnet.rng import Rng
from sonarnet.synth import synth_sonar_generate


@pytest.fixture(scope="session")
def tiny_set():
    """4 classes x 12 images at 16 px."""
    return synth_sonar_generate(4, 12, 16, Rng(5))


@pytest.fixture
def rng():
    return Rng(1234)


def naive_correlate(x, w, b, pad=0):
    """Direct six-loop cross-correlation, NCHW."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    out = np.zeros((n, f, h - k + 1, wd - k + 1))
    for i in range(n):
        for o in range(f):
            for y in range(h - k + 1):
                for z in range(wd - k + 1):
                    out[i, o, y, z] = np.sum(x[i, :, y:y + k, z:z + k] * w[o]) + b[o]
    return out


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
