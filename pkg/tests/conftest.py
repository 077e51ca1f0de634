import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_FILE = "test_acceptance.py"
_acceptance = {}


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One ``train-toy`` run through the CLI with the default run config (500 steps).

    Shared by the acceptance gate, the training tests and the left==right example.
    """
    from aaustereo import cli
    from aaustereo.config import RunConfig
    from aaustereo.model import AAUformer, load_weights
    from aaustereo.synth import synth_rds

    out = tmp_path_factory.mktemp("toy")
    t0 = time.perf_counter()
    code = cli.main(["train-toy", "--out", str(out)])
    elapsed = time.perf_counter() - t0
    cfg = RunConfig()
    model = load_weights(AAUformer(cfg.model, seed=cfg.seed), os.path.join(out, "weights.aauw"))
    return {"code": code, "out": out, "seconds": elapsed, "cfg": cfg, "model": model, "sample": synth_rds(cfg.rds)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE not in report.nodeid:
        return
    if report.when == "call" or report.failed:
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("measured", "")
        _acceptance[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        status, detail = _acceptance[name]
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
    passed = sum(s == "PASS" for s, _ in _acceptance.values())
    terminalreporter.write_line(f"{passed}/{len(_acceptance)} criteria passed")
