import os

# Pin BLAS threads before numpy loads so results are reproducible and worker
# processes in the experiment tests do not oversubscribe the machine.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from mglab.config import Config  # noqa: E402


@pytest.fixture(scope="session")
def cfg():
    return Config()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
