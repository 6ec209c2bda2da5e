import dataclasses
import math

import numpy as np
import pytest

from tbpo_lab.oracle import compute_values
from tbpo_lab.policy import TabularPolicy, reference_policy
from tbpo_lab.token_mdp import MdpSpec, TableReward, TargetStringReward

SIGMA1 = 1.0 / (1.0 + np.exp(-1.0))
Z_H1 = 0.5 * (math.e + 1)  # 1.859141

_CRITERIA = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    outcome = _CRITERIA.setdefault(crit, {"failed": False, "xfailed": False, "ran": False})
    if report.when == "call" or report.outcome != "passed":
        outcome["ran"] = True
    if hasattr(report, "wasxfail"):
        outcome["xfailed"] = True
    elif report.outcome == "failed":
        outcome["failed"] = True


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    out = yield
    rep = out.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep.criterion = int(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        o = _CRITERIA[n]
        if o["failed"]:
            status = "FAIL"
        elif o["xfailed"]:
            status = "FAIL (expected; part of the criterion is unattainable, see the xfail reason)"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n:2d}: {status}")


@pytest.fixture
def h1_spec():
    """V=2, H=1: R(root, 0) = 1 and R(root, 1) = 0."""
    return MdpSpec(2, 1, reward=TargetStringReward((0,), 1.0, 0.0))


@pytest.fixture
def uniform_ref(h1_spec):
    return TabularPolicy(h1_spec)


@pytest.fixture
def h1_values(h1_spec, uniform_ref):
    return compute_values(h1_spec, uniform_ref, 1.0)


@pytest.fixture
def small_spec():
    return MdpSpec(3, 3, seed=0, reward=TableReward(0, 1.0))


@pytest.fixture
def small_ref(small_spec):
    return reference_policy(small_spec)


def two_prompt_values():
    """H=1 tables where prompt 0 is the worked example and prompt 1 has zero rewards."""
    spec = MdpSpec(2, 1, prompts=(((), 1.0), ((1,), 1.0)), reward=TargetStringReward((0,), 1.0, 0.0))
    ref = TabularPolicy(spec)
    vt = compute_values(spec, ref, 1.0)
    uniform = np.full(2, 0.5)
    vt = dataclasses.replace(
        vt, log_z=np.array([math.log(Z_H1), 0.0]),
        pi_star=np.vstack([vt.pi_star[0], uniform]),
        log_pi_star=np.vstack([vt.log_pi_star[0], np.log(uniform)]),
        kl_star=np.array([vt.kl_star[0], 0.0]))
    return spec, ref, vt
