import numpy as np
import pytest
import torch

from vesselgan.synthetic import synthetic_dataset, write_drive_tree


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_drive():
    """A 20/20 DRIVE-shaped dataset of 80 px synthetic images."""
    return synthetic_dataset(size=80, seed=3)


@pytest.fixture(scope="session")
def drive_tree(tmp_path_factory):
    return write_drive_tree(tmp_path_factory.mktemp("drive"), size=80, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.append((props["criterion"], report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_CRITERIA, key=lambda c: int(c[0].split()[0])):
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {name}: {verdict}" + (f" ({detail})" if detail else ""))
