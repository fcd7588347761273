import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from qnnharden.analysis import analyze  # noqa: E402
from qnnharden.fixture import build_fixture  # noqa: E402


@pytest.fixture(scope="session")
def fixture_mlp():
    return build_fixture(42)


@pytest.fixture(scope="session")
def fixture_profile(fixture_mlp):
    return analyze(fixture_mlp.net, fixture_mlp.train)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
