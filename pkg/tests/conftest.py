import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from r3denoise import data, networks


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_r3l():
    """Small-seeded policy/value model reused by read-only tests."""
    return networks.init_params("r3l", seed=101)


@pytest.fixture(scope="session")
def tiny_r3n():
    return networks.init_params("r3n", seed=101)


@pytest.fixture(scope="session")
def toy_images():
    """Session corpus of small synthetic images (read-only)."""
    return data.make_synthetic_dataset(count=8, size=40, seed=77)


@pytest.fixture
def criterion_report(request):
    """Emit one PASS/FAIL line per acceptance criterion, bypassing capture."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(tag, ok, detail):
        line = f"{tag} {'PASS' if ok else 'FAIL'} - {detail}"
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line

    return report
