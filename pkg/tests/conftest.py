"""Shared fixtures and the acceptance-summary terminal hook."""

import numpy as np
import pytest

from flowmaplab.numerics import RngStream

# One line per acceptance criterion, appended by tests/test_acceptance.py
# and echoed after the run regardless of capture settings.
ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return RngStream(0, "test")


@pytest.fixture(scope="session")
def record_criterion():
    def _record(cid: str, passed: bool, detail: str) -> None:
        line = f"[{cid}] {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def assert_trees_equal(a, b, exact=True, path="tree"):
    """Structural equality of nested dict/list parameter trees."""
    if isinstance(a, dict):
        assert isinstance(b, dict) and set(a) == set(b), path
        for k in a:
            assert_trees_equal(a[k], b[k], exact, f"{path}.{k}")
    elif isinstance(a, (list, tuple)):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            assert_trees_equal(x, y, exact, f"{path}[{i}]")
    elif exact:
        assert np.array_equal(np.asarray(a), np.asarray(b)), path
    else:
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12, err_msg=path)
