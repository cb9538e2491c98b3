import pytest

from batchmf.model import SingleTypeConfig, SpeedupModel, TwoTypeConfig

_ACCEPTANCE = {}

# Reference rates: job generation 5000/s, service 1/mu(k) = 3.6e-4 + 5.2e-5 k,
# batching 1/M(k) = 7.2e-6 + 1e-6 k; two types with type 1 five times faster.
LAM = 5000.0
SERVICE = SpeedupModel.linear(5.2e-5, 3.6e-4)
BATCHING = SpeedupModel.linear(1e-6, 7.2e-6)
SERVICE2 = SpeedupModel.linear(5.3e-4, 5.4e-4)
SERVICE1 = SpeedupModel.linear(5.3e-4 / 5, 5.4e-4 / 5)


@pytest.fixture
def reference_single():
    def make(n, m, k, batching=BATCHING):
        return SingleTypeConfig(n, m, LAM, k, SERVICE, batching)

    return make


@pytest.fixture
def reference_two_type():
    def make(n, m, k, discipline="preemptive", batching=BATCHING):
        return TwoTypeConfig(n, m, LAM, 0.2, k, k, SERVICE1, SERVICE2, batching, batching, discipline)

    return make


@pytest.fixture
def acceptance():
    """Record one acceptance criterion outcome for the terminal summary."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
