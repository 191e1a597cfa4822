import hypothesis
import numpy as np
import pytest

from flowgrad.core import Conditioning, StateVector
from flowgrad.training import SyntheticTask, TrainConfig, train
from flowgrad.velocity import AnalyticGaussianField, EDMField

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_task():
    return SyntheticTask(data_dim=4, cond_dim=3, std=0.2, size=20_000, scalar_names=("tau", "zeta"))


@pytest.fixture(scope="session")
def toy_denoiser(toy_task):
    """Small trained EDM denoiser with two scalar conditioners (a few seconds of Adam)."""
    return train(toy_task, TrainConfig(steps=3000, hidden=(32, 32))).denoiser


@pytest.fixture(scope="session")
def toy_field(toy_denoiser):
    return EDMField(toy_denoiser)


@pytest.fixture
def toy_cond():
    return Conditioning(StateVector.from_array([0.1, -0.2, 0.3]), (("tau", 0.3), ("zeta", 0.4)))


@pytest.fixture
def analytic():
    rng = np.random.default_rng(42)
    M = rng.standard_normal((4, 3))
    B = rng.standard_normal((4, 1))
    return AnalyticGaussianField(M, 1.0, B, ("tau",))


@pytest.fixture
def analytic_cond():
    return Conditioning(StateVector.from_array([0.5, -1.0, 0.25]), (("tau", 2.0),))


@pytest.fixture(scope="session")
def gauss2():
    """Two-dimensional conditional Gaussian task and a model trained for 20k steps."""
    task = SyntheticTask(data_dim=2, cond_dim=2, std=0.2, seed=0)
    return task, train(task, TrainConfig(steps=20_000))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            name = nodeid.split("::")[-1].removeprefix("test_")
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((name, f"{'PASS' if outcome == 'passed' else 'FAIL'} {name}: {detail}".rstrip(": ")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
