import numpy as np
import pytest
from hypothesis import settings

from depthfusion.liegroup import Pose, exp_rotation

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_rotation(axis * rng.uniform(0.0, max_angle))


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, max_t: float = 5.0) -> Pose:
    return Pose(random_rotation(rng, max_angle), rng.uniform(-max_t, max_t, 3))


def random_spd(rng: np.random.Generator, n: int = 6, lo: float = 0.5, hi: float = 2.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return (q * rng.uniform(lo, hi, n)) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def room_cloud(n: int = 5000, seed: int = 0) -> np.ndarray:
    """Noiseless box-room surface points hit by rays cast from the origin in random directions."""
    from depthfusion.simulator import box_room

    r = np.random.default_rng(seed)
    d = r.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * box_room(seed).cast(np.zeros(3), d)[:, None]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
