import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edgehand.bench import SequenceSpec, generate_sequence  # noqa: E402
from edgehand.config import Settings  # noqa: E402

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def settings():
    return Settings()


@pytest.fixture
def base_pose():
    return SequenceSpec().pose_at(0.0)


@pytest.fixture(scope="session")
def short_sequence(settings):
    return generate_sequence(SequenceSpec(frame_count=12), settings)


def random_pose(rs: np.random.RandomState, spread: float = 1.0) -> np.ndarray:
    """A valid pose near the default view, drawn from ``rs``."""
    h = SequenceSpec().pose_at(float(rs.uniform(0, 10)))
    h[0:3] += spread * rs.uniform(-0.02, 0.02, 3)
    q = h[3:7] + spread * rs.uniform(-0.2, 0.2, 4)
    h[3:7] = q / np.linalg.norm(q)
    flex = np.clip(h[7:] + spread * rs.uniform(-0.4, 0.4, 20), 0.0, 1.6)
    flex[1::4] = np.clip(h[8::4] + spread * rs.uniform(-0.2, 0.2, 5), -0.35, 0.35)
    h[7:] = flex
    return h
