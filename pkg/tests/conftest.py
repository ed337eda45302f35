import numpy as np
import pytest

from fastsplat import core
from fastsplat.camera import Camera, look_at


def random_store(rng, n, dtype=np.float64, opacity=(0.5, 1.0), spread=0.5):
    """Random Gaussians around the origin; ``opacity`` is (mean, std) of the logits."""
    q = rng.normal(size=(n, 4))
    return core.ParameterStore(
        means=rng.normal(0, spread, (n, 3)), log_scales=np.log(rng.uniform(0.05, 0.3, (n, 3))),
        quaternions=q, opacity_logits=rng.normal(opacity[0], opacity[1], (n, 1)),
        sh_dc=rng.normal(0, 0.6, (n, 3)), sh_rest=rng.normal(0, 0.1, (n, 15, 3))).astype(dtype)


def orbit_camera(rng, size=32, distance=4.0, height=None):
    eye = rng.normal(size=3)
    eye = distance * eye / np.linalg.norm(eye)
    f = 1.25 * size
    h = size if height is None else height
    return Camera(look_at(eye, [0, 0, 0]), f, f, size / 2, h / 2, size, h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion results, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
