import numpy as np
import pytest

from splat4d.camera import CameraIntrinsics, CameraView, look_at
from splat4d.gaussians import Gaussian4D, Scene4D


def unit_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n, spread=0.5, opacity=(0.2, 0.9)):
    params = np.concatenate(
        [
            rng.uniform(-spread, spread, (n, 3)),
            rng.uniform(-0.5, 0.5, (n, 1)),
            rng.uniform(0.05, 0.25, (n, 3)),
            rng.uniform(0.3, 1.5, (n, 1)),
            unit_quats(rng, n),
            unit_quats(rng, n),
            rng.uniform(0.0, 1.0, (n, 3)),
            rng.uniform(*opacity, (n, 1)),
        ],
        axis=1,
    )
    return Scene4D.from_params(params)


def orbit(az_deg, el_deg=0.0, time=0.0, size=32, radius=2.7):
    az, el = np.radians(az_deg), np.radians(el_deg)
    eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return CameraView(CameraIntrinsics.from_fov(size, size), look_at(eye), time)


def axis_gaussian(mean=(0, 0, 0, 0), scale=(0.1, 0.1, 0.1, 0.5), rgb=(1, 0, 0), opacity=0.5):
    return Gaussian4D(np.array(mean, float), np.array(scale, float), np.array([1.0, 0, 0, 0]),
                      np.array([1.0, 0, 0, 0]), np.array(rgb, float), opacity)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one acceptance line (shown in the terminal summary) and assert it."""

    def record(number, name, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        assert ok, line

    return record
