import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from fluxrecon.physics import GasModel


@pytest.fixture
def gas():
    return GasModel(gamma=1.4, R=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
