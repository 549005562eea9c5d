import numpy as np
import pytest

from ddpmlmc.mesh import DeviceGeometry, build_device_mesh


@pytest.fixture(scope="session")
def geometry():
    return DeviceGeometry()


@pytest.fixture(scope="session")
def mesh5(geometry):
    return build_device_mesh(geometry, 5.0)


@pytest.fixture(scope="session")
def mesh25(geometry):
    return build_device_mesh(geometry, 2.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def device_report():
    """Full device calibration: 16 seeds on h = 5 .. 0.625 nm against 0.3125 nm."""
    from ddpmlmc.calibration import calibrate_device
    from ddpmlmc.stochastic import DeviceSampler

    return calibrate_device(DeviceSampler(seed=0), hs=(5.0, 2.5, 1.25, 0.625), h_ref=0.3125,
                            seeds=16, variance_levels=4, timing_samples=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})")
