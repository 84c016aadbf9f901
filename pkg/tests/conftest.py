import numpy as np
import pytest
import scipy.sparse


def random_interactions(rng, M, N, density=0.3):
    """A random binary matrix where every row and column has a nonzero."""
    R = (rng.random((M, N)) < density).astype(float)
    R[np.arange(M), rng.integers(0, N, M)] = 1
    R[rng.integers(0, M, N), np.arange(N)] = 1
    return R


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_matrix():
    # Two obvious communities plus one bridging interaction
    R = np.zeros((10, 8))
    R[:5, :4] = 1
    R[5:, 4:] = 1
    R[0, 4] = 1
    R[9, 3] = 1
    return scipy.sparse.csr_matrix(R)
