"""Every named invariant of the check registry as its own pytest case."""
import pytest

from bevfuse.harness.checks import REGISTRY


@pytest.mark.parametrize("name", list(REGISTRY))
def test_invariant(name):
    REGISTRY[name]()
