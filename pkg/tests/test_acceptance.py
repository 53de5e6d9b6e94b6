"""The acceptance criteria at their stated sizes and tolerances.

Each test prints one PASS/FAIL line. Criterion 3 asserts the literal serial
total the criterion states; the notes explain why that number cannot be
met together with the criterion's own per-block breakdown.
"""
import pytest

from bevfuse.harness import acceptance

LINES = []  # echoed in the terminal summary by conftest.py


@pytest.mark.parametrize("crit", acceptance.CRITERIA, ids=[f"criterion_{i}" for i in range(1, 9)])
def test_criterion(crit):
    res = crit()
    LINES.append(res.line())
    print(res.line())
    assert res.passed, res.detail
