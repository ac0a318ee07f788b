import numpy as np
import pytest

from vesselnet.data import synthetic_vessels
from vesselnet.rng import Rng

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def smoke_samples():
    return synthetic_vessels(2, 64, seed=0)


@pytest.fixture
def acceptance(request):
    """Record one acceptance criterion; reported at the end of the run."""
    entry = {"name": request.node.name, "detail": ""}

    def note(criterion, detail=""):
        entry["criterion"] = criterion
        entry["detail"] = detail

    yield note
    rep = getattr(request.node, "rep_call", None)
    entry["passed"] = bool(rep is not None and rep.passed)
    _ACCEPTANCE.append(entry)


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for e in sorted(_ACCEPTANCE, key=lambda e: e.get("criterion", e["name"])):
        status = "PASS" if e["passed"] else "FAIL"
        label = e.get("criterion", e["name"])
        terminalreporter.write_line(f"{status}  {label}  {e['detail']}")
