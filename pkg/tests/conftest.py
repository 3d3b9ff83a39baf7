import os

# single-threaded BLAS keeps acceptance runs bit-reproducible and honest
# against the single-thread runtime budgets
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from surfmap.template import make_icosphere_template


@pytest.fixture(scope="session")
def sphere_template():
    return make_icosphere_template(3, "sphere")

@pytest.fixture(scope="session")
def blob_template():
    return make_icosphere_template(3, "blob", [0.3, 0.2])


@pytest.fixture(scope="session")
def small_blob_template():
    return make_icosphere_template(2, "blob", [0.3, 0.2])


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]
