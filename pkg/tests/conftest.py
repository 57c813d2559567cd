import pytest

from tcpredict.backends import find_blas


@pytest.fixture(scope="session")
def blas_path():
    path = find_blas()
    if path is None:
        pytest.skip("no CBLAS library on this machine")
    return path
