from dataclasses import replace

import numpy as np
import pytest

from nvfringe import pipeline, tps


@pytest.fixture
def rng():
    return np.random.default_rng(20201019)


@pytest.fixture
def small_config():
    """24x24 dipole experiment with a short fit, for fast end-to-end tests."""
    return replace(pipeline.flagship_config(7), nx=24, ny=24, fit=tps.FitConfig(max_iterations=150))
