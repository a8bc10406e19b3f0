import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()

CRITERIA = {
    1: "conjugacy exactness",
    2: "leaf-likelihood oracle",
    3: "getting-it-right (Geweke)",
    4: "sparse selection",
    5: "Minnesota lag decay",
    6: "lambda-grid monotonicity",
    7: "SV recovery",
    8: "horseshoe factor pruning",
    9: "LPDS oracle and RMSPE identities",
    10: "Minnesota vs uniform LPDS",
    11: "reproducibility",
}


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


class Recorder:
    def __init__(self, store):
        self.store = store

    def __call__(self, number, passed, detail):
        self.store[number] = (bool(passed), detail)
        return passed


@pytest.fixture(scope="session")
def acceptance(pytestconfig):
    return Recorder(pytestconfig.stash[ACCEPTANCE_KEY])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in CRITERIA.items():
        if number in store:
            passed, detail = store[number]
            status = "PASS" if passed else "FAIL"
        else:
            status, detail = "NOT RUN", ""
        terminalreporter.write_line(f"criterion {number:2d} {status:7s} {title}: {detail}")
