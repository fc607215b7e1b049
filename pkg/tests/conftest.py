import warnings

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """On-disk synthetic sequence (small images, short training config)."""
    from hogs.pipeline import write_fixture

    out = tmp_path_factory.mktemp("fixture")
    write_fixture(out, n_train=4, n_test=2, size=64, iterations=4, n_augment_poses=3, views=2)
    return out


@pytest.fixture(scope="session")
def model64():
    from hogs.fixtures import build_model

    return build_model(k=1, sh_degree=1, dtype=torch.float64)


@pytest.fixture(scope="session")
def ref_pose():
    from hogs.fixtures import reference_pose

    return reference_pose()


_acceptance: dict[str, tuple[str, str, float]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        msg = next((v for k, v in report.user_properties if k == "acceptance"), "")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _acceptance[report.nodeid.split("::")[-1]] = (status, msg, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, msg, dur) in sorted(_acceptance.items()):
        terminalreporter.write_line(f"{status}  {name} [{dur:.1f} s]  {msg}")
