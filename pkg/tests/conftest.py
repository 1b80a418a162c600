import pytest

from sdp_hsi.checks import gradient_suite


@pytest.fixture(scope="session")
def grad_reports():
    """Finite-difference reports for every differentiable component (64-bit, eps 1e-5)."""
    return gradient_suite(seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
