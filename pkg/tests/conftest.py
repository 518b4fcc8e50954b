import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tofcalib.synthetic import SynthConfig, generate, render_dataset

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def noiseless():
    """Three noiseless images of the full 11x11 board, with groundtruth."""
    ds, gt = render_dataset(SynthConfig(n_images=3, sigma_px=0.0, sigma_d=0.0, seed=3))
    return ds, gt


@pytest.fixture(scope="session")
def noisy():
    """Seven images at 0.01 px / 10 mm noise."""
    return generate(SynthConfig(seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_acceptance_lines: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    for key, value in report.user_properties:
        if key == "acceptance":
            _acceptance_lines[report.nodeid] = value
    if report.failed and report.nodeid not in _acceptance_lines:
        _acceptance_lines[report.nodeid] = (
            f"{report.nodeid.split('::')[-1]}: FAIL (errored before a verdict)"
        )


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for nodeid in sorted(_acceptance_lines):
            terminalreporter.write_line(_acceptance_lines[nodeid])
