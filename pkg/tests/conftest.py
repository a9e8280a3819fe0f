import numpy as np
import pytest

from psdlab.numkit import RngState, normalize_rows_l2


@pytest.fixture
def rng():
    return RngState(1234)


def unit_batch(rng: RngState, n: int, d: int):
    """Random unit-row image/text embedding matrices."""
    return normalize_rows_l2(rng.normals(n, d)), normalize_rows_l2(rng.normals(n, d))


def lift_sims_to_embeddings(sims):
    """Unit-row (V, T) whose dot-product matrix equals ``sims`` exactly.

    V gets the first n canonical basis vectors of R^{n+1}; column j of sims
    becomes the first n coordinates of T row j, with the spare coordinate
    absorbing the norm (requires every column norm <= 1).
    """
    s = np.asarray(sims, dtype=np.float64)
    n = s.shape[0]
    v = np.zeros((n, n + 1))
    v[np.arange(n), np.arange(n)] = 1.0
    t = np.zeros((n, n + 1))
    t[:, :n] = s.T
    residual = 1.0 - (s * s).sum(axis=0)
    if residual.min() < 0:
        raise ValueError("columns of sims must have norm <= 1")
    t[:, n] = np.sqrt(residual)
    return v, t
