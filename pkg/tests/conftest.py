import numpy as np
import pytest

from nestmv.core import MetaEmbeddingSet, Side

_acceptance_lines = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion reported in the summary")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    label = dict(report.user_properties).get("acceptance")
    if label:
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _acceptance_lines.append(f"{status}  {label}")


def pytest_runtest_setup(item):
    m = item.get_closest_marker("acceptance")
    if m:
        item.user_properties.append(("acceptance", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def random_set(rng, R, D, side=Side.QUERY):
    return MetaEmbeddingSet.from_raw(rng.standard_normal((R, D)), side)


@pytest.fixture(scope="session")
def trained_run():
    """The default desk-scale training run, shared by every test that needs it."""
    from nestmv.train import ToyConfig, train_toy
    return train_toy(ToyConfig())
