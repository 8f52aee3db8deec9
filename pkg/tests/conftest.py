"""Shared test setup.

BLAS thread pools are pinned before numpy is first imported so matmul
reductions happen in a fixed order; several tests compare runs bit-for-bit.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)
