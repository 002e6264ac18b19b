import sys

import numpy as np
import pytest

from histoattn import data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Eight images per (class, magnification), enough for a patient-level 70/15/15 split."""
    root = tmp_path_factory.mktemp("synth")
    data.generate_synthetic(root, 8, size=(48, 48), seed=3)
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
