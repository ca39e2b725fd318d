import numpy as np
import pytest

from pdunet.geometry import FanGeometry, ParallelGeometry, make_fan_default


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_parallel():
    # 16 px image, diagonal 22.6 px -> 25 detectors cover it
    return ParallelGeometry(n_angles=20, angle_step=np.pi / 20, n_detectors=25)


@pytest.fixture(scope="session")
def small_fan():
    return FanGeometry(n_angles=24, angle_step=2 * np.pi / 24, n_detectors=40, detector_spacing=1.0,
                       source_iso_dist=40.0, detector_iso_dist=20.0)


@pytest.fixture(scope="session")
def fan64():
    return make_fan_default(64)



# ------------------------------------------------------------------ acceptance summary

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _ACCEPTANCE[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        number = int(name.split("_")[2])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {name}  {detail}")
