import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pfedcfr import data, nn  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return nn.ModelSpec.mlp([4, 5, 3, 3])


@pytest.fixture(scope="session")
def synthetic_shards():
    ds = data.gen_synthetic(2, 40, 10, 4, seed=3)
    return data.partition_heterogeneous(ds, data.PartitionConfig(4, 2, 1.0, 3, 0.8))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
