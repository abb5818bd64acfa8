import warnings

import pytest

from switchlq.errors import ZeroRateWarning

from instances import dm_from, fast_switching, random_suite, scalar_benchmark


@pytest.fixture(autouse=True)
def _quiet_zero_rates():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroRateWarning)
        yield


@pytest.fixture(scope="session")
def scalar_dm():
    return scalar_benchmark()


@pytest.fixture(scope="session")
def switching_dm():
    return fast_switching()


@pytest.fixture(scope="session")
def inhom_dm():
    return dm_from("two_regime_inhomogeneous.json")


@pytest.fixture(scope="session")
def suite():
    return random_suite()
