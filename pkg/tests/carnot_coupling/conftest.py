"""carnot_coupling pytest configuration and utils."""

import numpy as np
import pytest
from click.testing import CliRunner


@pytest.fixture(scope="session")
def cli_runner() -> CliRunner:
    """Return a `CliRunner` instance."""
    return CliRunner()


@pytest.fixture()
def rng() -> np.random.Generator:
    """Return a freshly seeded random generator."""
    return np.random.default_rng(20240601)
