import numpy as np
import pytest

from dpo3d import kernels
from dpo3d.geom3d import Box3D

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(params=kernels.backends(), ids=lambda m: m.BACKEND)
def backend(request):
    """Each importable kernel backend in turn."""
    return request.param


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion for the summary."""
    def record(number: int, name: str, passed: bool, detail: str = "") -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


def random_box(rng: np.random.Generator, spread: float = 3.0) -> Box3D:
    return Box3D(
        float(rng.uniform(-spread, spread)), float(rng.uniform(-spread, spread)),
        float(rng.uniform(0.0, 1.0)),
        float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.5, 3.0)), float(rng.uniform(0.5, 2.0)),
        float(rng.uniform(-np.pi, np.pi)),
    )
