import numpy as np
import pytest

import mpolar

BACKENDS = ["python"] + (["compiled"] if mpolar.HAVE_COMPILED else [])


@pytest.fixture(params=BACKENDS)
def any_backend(request):
    """Run the test once per available kernel backend."""
    mpolar.set_backend(request.param)
    yield request.param
    mpolar.set_backend("auto")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
