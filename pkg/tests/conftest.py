import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from imucoco.body import build_canonical_body
from imucoco.motion import generate_motion
from imucoco.network import NetConfig, init_model

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")

TINY_NET = NetConfig(d_in=8, d_h=8, d_e=4, n_freq=2, n_mfe=1, depth=1, d_kr=8, d_pr=16)


@pytest.fixture(scope="session")
def body():
    return build_canonical_body()


@pytest.fixture(scope="session")
def walk():
    return generate_motion(3, 2.0, "walk")


@pytest.fixture(scope="session")
def mixed():
    return generate_motion(5, 2.0, "mixed")


@pytest.fixture
def tiny_model(body):
    return init_model(TINY_NET, seed=0, body_fingerprint=body.fingerprint)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----- acceptance report ----------------------------------------------------------
# Tests marked ``criterion("label")`` get one PASS/FAIL line in the terminal
# summary, followed by whatever they recorded with ``record_property``.

_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, status='PASS'): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    status = marker.kwargs.get("status", "PASS") if report.passed else "FAIL"
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA.append((status, marker.args[0], detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for status, label, detail in _CRITERIA:
        terminalreporter.write_line(f"{status:<11} {label}" + (f"  [{detail}]" if detail else ""))
