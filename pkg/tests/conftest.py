import numpy as np
import pytest
import torch

from progressive3d.mesh import build_icosphere
from progressive3d.render import Camera


@pytest.fixture(scope="session")
def sphere2():
    return build_icosphere(2)


@pytest.fixture(scope="session")
def sphere3():
    return build_icosphere(3)


@pytest.fixture
def front_camera():
    return Camera(azimuth=0.0, elevation=0.0, distance=3.0, fov=45.0, image_size=32)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request, capsys):
    """Record one PASS/FAIL line per acceptance criterion, shown live and in the summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        request.config.stash[_ACCEPTANCE].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
