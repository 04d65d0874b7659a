"""Shared fixtures: the seeded reference coupled problem and helpers."""

import numpy as np
import pytest

from krylov_recycle.coupled import gen_coupled_problem, monolithic_oracle

# Reference coupled problem: 24x24 fluid grid (n=576), 8 structural
# unknowns, moderate coupling (block Gauss-Seidel spectral radius ~0.30).
REFERENCE_KWARGS = dict(n_grid=(24, 24), n_s=8, peclet=30.0,
                        coupling_strength=45.0, seed=1234)


@pytest.fixture(scope="session")
def reference_problem():
    return gen_coupled_problem(**REFERENCE_KWARGS)


@pytest.fixture(scope="session")
def reference_oracle(reference_problem):
    return monolithic_oracle(reference_problem)


def random_sparse(rng, n, density=0.1, diag_boost=None):
    """Seeded random sparse test matrix with a dominant diagonal."""
    from krylov_recycle.operators import SparseMatrix

    mask = rng.random((n, n)) < density
    dense = np.where(mask, rng.standard_normal((n, n)), 0.0)
    boost = diag_boost if diag_boost is not None else n * density + 2.0
    np.fill_diagonal(dense, dense.diagonal() + boost)
    return SparseMatrix.from_dense(dense)
