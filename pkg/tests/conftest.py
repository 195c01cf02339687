import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

settings.register_profile("gfkd", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("gfkd")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
