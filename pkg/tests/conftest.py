import os
from pathlib import Path

import numpy as np
import pytest

from cife.numerics import Tensor

REPO = Path(__file__).resolve().parents[1]
RUN_DIR = Path(os.environ.get("CIFE_RUN_DIR", REPO / "runs" / "scripted"))


def perturbed(params, seed, scale=0.05, dtype=None):
    """Copy of ``params`` with every tensor nudged (so zero-init layers carry signal)."""
    g = np.random.default_rng(seed)
    out = {}
    for k in sorted(params):
        data = params[k].data
        if dtype is not None:
            data = data.astype(dtype)
        out[k] = Tensor((data + scale * g.standard_normal(data.shape)).astype(data.dtype))
    return out


@pytest.fixture(scope="session")
def scripted():
    """The cached scripted run (trains on first use, about 20 minutes on one core)."""
    from cife.pipeline import run_pipeline
    return run_pipeline(RUN_DIR)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1][len("test_criterion_"):]
        _ACCEPTANCE[name] = (report.outcome, dict(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, props = _ACCEPTANCE[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"{status}  {name}")
        for key, value in props.items():
            tr.write_line(f"        {key}: {value}")
