import numpy as np
import pytest

from zonetrain.geometry import FrameGeometry, PatchGridSpec, UltrasoundFrame
from zonetrain.synthphantom import small_geometry


def noise_frame(geometry=FrameGeometry(), seed=0, label=0, frame_id=None):
    rng = np.random.default_rng(seed)
    samples = rng.standard_normal(geometry.shape).astype(np.float32)
    return UltrasoundFrame(geometry, samples, frame_id or f"f{seed}", label)


def ramp_frame(geometry=FrameGeometry(), label=0):
    """samples[r, c] = r * 1000 + c, so every pixel names its own position."""
    r, c = np.mgrid[:geometry.axial_pixels, :geometry.lateral_pixels]
    return UltrasoundFrame(geometry, (r * 1000 + c).astype(np.float64), "ramp", label)


@pytest.fixture
def desk():
    return small_geometry()


@pytest.fixture
def default_grid():
    return FrameGeometry(), PatchGridSpec()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
