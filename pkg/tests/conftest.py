import numpy as np
import pytest

from pdrd.hsi_io import default_scene_spec, synth_scene


@pytest.fixture(scope="session")
def small_scene():
    """24 x 24 scene with 8 bands and four 2 x 2 anomalies."""
    spec = default_scene_spec(height=24, width=24, bands=8, anomaly_count=4, anomaly_size=4, seed=11)
    return synth_scene(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
