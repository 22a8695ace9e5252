import numpy as np
import pytest

from constellation_loc.core import ObjectMap


def random_map(rng, n=40, extent=60.0, n_classes=6, z=2.0) -> ObjectMap:
    pos = np.column_stack([rng.uniform(-extent, extent, (n, 2)), rng.uniform(0, z, n)])
    return ObjectMap(np.arange(n) * 3 + 1, rng.integers(0, n_classes, n), pos, n_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
