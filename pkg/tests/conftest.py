import sys
from pathlib import Path

import numpy as np
import pytest

from patchlm.perf import tune_malloc

tune_malloc()

sys.path.insert(0, str(Path(__file__).parent))  # for `oracles`


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def single_thread_env():
    """Env vars pinning BLAS to one thread for subprocess runs."""
    import os

    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = "1"
    return env
