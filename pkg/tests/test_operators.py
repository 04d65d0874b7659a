"""Sparse operator, ILU, preconditioner, generator and Matrix Market tests."""

import numpy as np
import pytest

from conftest import random_sparse
from krylov_recycle.errors import (
    DimensionMismatch,
    NonSquare,
    NotOrthonormal,
    ParseError,
    UnsupportedField,
    ZeroPivot,
)
from krylov_recycle.gmres import gmres_solve
from krylov_recycle.operators import (
    IdentityPreconditioner,
    IluPreconditioner,
    InnerGmresPreconditioner,
    JacobiPreconditioner,
    MatvecCounter,
    SparseMatrix,
    as_operator,
    gen_convection_diffusion,
    ilu_factor,
    precondition_apply,
    projected_operator,
    read_matrix_market,
    read_rhs,
    spmv,
    write_matrix_market,
    write_rhs,
)


class TestSparseMatrix:
    def test_identity_matvec(self):
        A = SparseMatrix.identity(4)
        x = np.array([1.0, -2.0, 3.0, 0.5])
        assert np.array_equal(A.matvec(x), x)

    def test_zero_matrix(self):
        A = SparseMatrix.from_coo(3, [], [], [])
        assert np.array_equal(A.matvec(np.ones(3)), np.zeros(3))

    def test_seeded_vs_dense_oracle(self):
        rng = np.random.default_rng(50)
        A = random_sparse(rng, 50, density=0.15)
        x = rng.standard_normal(50)
        dense = A.to_dense()
        assert np.linalg.norm(A.matvec(x) - dense @ x) < 1e-13 * np.linalg.norm(x)

    def test_dimension_mismatch(self):
        A = SparseMatrix.identity(4)
        with pytest.raises(DimensionMismatch):
            A.matvec(np.ones(5))

    def test_duplicates_summed_in_coo(self):
        A = SparseMatrix.from_coo(2, [0, 0], [1, 1], [2.0, 3.0])
        assert A.nnz == 1
        assert A.to_dense()[0, 1] == 5.0

    def test_spmv_counts(self):
        counter = MatvecCounter()
        A = SparseMatrix.identity(3)
        spmv(A, np.ones(3), counter)
        spmv(A, np.ones(3), counter)
        assert counter.count == 2

    def test_linearity(self):
        rng = np.random.default_rng(4)
        A = random_sparse(rng, 30)
        op = as_operator(A)
        x, y = rng.standard_normal(30), rng.standard_normal(30)
        a, b = 0.7, -1.3
        lhs = op(a * x + b * y)
        rhs = a * op(x) + b * op(y)
        assert np.linalg.norm(lhs - rhs) < 1e-12 * max(np.linalg.norm(lhs), 1.0)


class TestIlu:
    def test_diagonal_matrix(self):
        A = SparseMatrix.from_dense(np.diag([2.0, 5.0, -3.0]))
        fact = ilu_factor(A, 0)
        assert np.allclose(fact.L.to_dense(), np.eye(3))
        assert np.allclose(fact.U.to_dense(), A.to_dense())

    def test_tridiagonal_exact(self):
        n = 12
        dense = np.diag(np.full(n, 4.0)) + np.diag(np.full(n - 1, -1.0), 1) \
            + np.diag(np.full(n - 1, -1.5), -1)
        A = SparseMatrix.from_dense(dense)
        fact = ilu_factor(A, 0)
        LU = fact.L.to_dense() @ fact.U.to_dense()
        assert np.linalg.norm(LU - dense) < 1e-12 * np.linalg.norm(dense)
        # exact factorization means one preconditioned iteration suffices
        b = np.arange(1.0, n + 1.0)
        _, report = gmres_solve(A, IluPreconditioner(fact), b, m=10, tol=1e-12)
        assert report.converged
        assert report.iterations == 1

    def test_level_one_has_more_fill_and_smaller_defect(self):
        A = gen_convection_diffusion((16, 16), 25.0)
        f0 = ilu_factor(A, 0)
        f1 = ilu_factor(A, 1)
        assert f1.pattern_nnz > f0.pattern_nnz
        dense = A.to_dense()
        d0 = np.linalg.norm(f0.L.to_dense() @ f0.U.to_dense() - dense)
        d1 = np.linalg.norm(f1.L.to_dense() @ f1.U.to_dense() - dense)
        assert d1 < d0

    @pytest.mark.parametrize("level", [0, 1, 2])
    def test_residual_vanishes_on_pattern(self, level):
        # Defining property of the incomplete factorization: A - L U is
        # zero at every position of the level-k pattern (fill appears only
        # outside it).
        A = gen_convection_diffusion((10, 10), 15.0)
        fact = ilu_factor(A, level)
        R = A.to_dense() - fact.L.to_dense() @ fact.U.to_dense()
        for M in (fact.L, fact.U):
            for i in range(A.n):
                cols, _ = M.row(i)
                for j in cols:
                    assert abs(R[i, j]) < 1e-12 * np.abs(A.values).max()

    def test_zero_pivot_shift_retry(self):
        A = SparseMatrix.from_dense(np.array([[0.0, 1.0], [1.0, 1.0]]))
        with pytest.warns(RuntimeWarning):
            fact = ilu_factor(A, 0)
        assert fact.U.diagonal()[0] != 0.0

    def test_zero_pivot_fatal(self):
        # the zero matrix cannot be rescued: the diagonal shift is also zero
        A = SparseMatrix.from_coo(2, [], [], [])
        with pytest.raises(ZeroPivot), pytest.warns(RuntimeWarning):
            ilu_factor(A, 0, shift_retry=True)


class TestPreconditioners:
    def test_identity(self):
        v = np.array([1.0, 2.0])
        out = precondition_apply(IdentityPreconditioner(), v)
        assert np.array_equal(out, v)

    def test_ilu_on_diagonal(self):
        A = SparseMatrix.from_dense(np.diag([2.0, 4.0]))
        P = IluPreconditioner(ilu_factor(A, 0))
        assert np.allclose(precondition_apply(P, np.array([2.0, 4.0])), [1.0, 1.0])

    def test_jacobi(self):
        A = SparseMatrix.from_dense(np.diag([2.0, 4.0]))
        P = JacobiPreconditioner(A)
        assert np.allclose(P.apply(np.array([2.0, 4.0])), [1.0, 1.0])

    def test_inner_gmres_full_space_is_direct_solve(self):
        rng = np.random.default_rng(17)
        n = 12
        A = random_sparse(rng, n, density=0.4)
        op = as_operator(A)
        P = InnerGmresPreconditioner(op, m_i=n)
        v = rng.standard_normal(n)
        z = P.apply(v)
        xref = np.linalg.solve(A.to_dense(), v)
        assert np.linalg.norm(z - xref) < 1e-10 * np.linalg.norm(xref)
        assert P.is_variable

    def test_inner_gmres_counts_inner_applications(self):
        rng = np.random.default_rng(18)
        n = 20
        A = random_sparse(rng, n)
        counter = MatvecCounter()
        op = as_operator(A, counter)
        P = InnerGmresPreconditioner(op, m_i=5)
        P.apply(rng.standard_normal(n))
        assert counter.count == 5

    def test_ilu_apply_not_counted(self):
        A = gen_convection_diffusion((4, 4), 1.0)
        counter = MatvecCounter()
        as_operator(A, counter)
        P = IluPreconditioner(ilu_factor(A, 0))
        P.apply(np.ones(A.n))
        assert counter.count == 0

    def test_inner_gmres_happy_breakdown_is_early_success(self):
        # On the identity the inner solve terminates after one step and
        # still returns the exact solution.
        A = SparseMatrix.identity(10)
        counter = MatvecCounter()
        op = as_operator(A, counter)
        P = InnerGmresPreconditioner(op, m_i=6)
        v = np.arange(1.0, 11.0)
        z = P.apply(v)
        assert np.allclose(z, v, atol=1e-13)
        assert counter.count == 1


class TestProjectedOperator:
    def test_empty_projector_is_same_operator(self):
        A = SparseMatrix.identity(5)
        op = as_operator(A)
        proj = projected_operator(op, np.zeros((5, 0)))
        assert proj is op

    def test_full_span_gives_zero(self):
        A = SparseMatrix.identity(5)
        proj = projected_operator(A, np.eye(5))
        assert np.linalg.norm(proj(np.ones(5))) < 1e-14

    def test_image_orthogonal_to_c(self):
        rng = np.random.default_rng(30)
        A = random_sparse(rng, 30)
        C, _ = np.linalg.qr(rng.standard_normal((30, 3)))
        proj = projected_operator(A, C)
        for _ in range(3):
            v = rng.standard_normal(30)
            assert np.linalg.norm(C.T @ proj(v)) < 1e-12

    def test_projector_idempotent(self):
        rng = np.random.default_rng(31)
        C, _ = np.linalg.qr(rng.standard_normal((20, 4)))
        w = rng.standard_normal(20)
        once = w - C @ (C.T @ w)
        twice = once - C @ (C.T @ once)
        assert np.linalg.norm(twice - once) < 1e-12

    def test_counts_one_per_application(self):
        rng = np.random.default_rng(32)
        A = random_sparse(rng, 15)
        counter = MatvecCounter()
        op = as_operator(A, counter)
        C, _ = np.linalg.qr(rng.standard_normal((15, 2)))
        proj = projected_operator(op, C)
        proj(np.ones(15))
        assert counter.count == 1

    def test_not_orthonormal(self):
        A = SparseMatrix.identity(4)
        with pytest.raises(NotOrthonormal):
            projected_operator(A, np.ones((4, 2)))


class TestConvectionDiffusion:
    def test_pure_diffusion_symmetric(self):
        A = gen_convection_diffusion((6, 7), 0.0)
        dense = A.to_dense()
        assert np.max(np.abs(dense - dense.T)) < 1e-13 * np.max(np.abs(dense))

    def test_grid_and_stencil(self):
        A = gen_convection_diffusion((4, 4), 3.0)
        assert A.n == 16
        row_counts = np.diff(A.row_ptr)
        assert row_counts.max() <= 5

    def test_nonsymmetric_for_positive_peclet(self):
        A = gen_convection_diffusion((5, 5), 10.0)
        dense = A.to_dense()
        assert np.max(np.abs(dense - dense.T)) > 1.0

    def test_determinism(self):
        A1 = gen_convection_diffusion((8, 8), 12.5, seed=1)
        A2 = gen_convection_diffusion((8, 8), 12.5, seed=2)
        assert np.array_equal(A1.values, A2.values)

    def test_ilu_beats_unpreconditioned(self):
        rng = np.random.default_rng(9)
        A = gen_convection_diffusion((32, 32), 50.0)
        b = rng.standard_normal(A.n)
        x_raw, rep_raw = gmres_solve(A, None, b, m=30, tol=1e-8,
                                     max_matvecs=50_000)
        x_ilu, rep_ilu = gmres_solve(A, IluPreconditioner(ilu_factor(A, 0)),
                                     b, m=30, tol=1e-8, max_matvecs=50_000)
        assert rep_ilu.converged
        assert rep_ilu.matvecs < rep_raw.matvecs
        # direct-solve correctness anchor for the returned solution
        res = np.linalg.norm(b - A.matvec(x_ilu)) / np.linalg.norm(b)
        assert res <= 1.05e-8


class TestMatrixMarket:
    def test_identity_roundtrip(self, tmp_path):
        path = tmp_path / "eye.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n"
                        "2 2 2\n1 1 1.0\n2 2 1.0\n")
        A = read_matrix_market(path)
        assert np.allclose(A.to_dense(), np.eye(2))

    def test_symmetric_expansion(self, tmp_path):
        path = tmp_path / "sym.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real symmetric\n"
                        "3 3 2\n1 1 2.0\n3 1 -1.5\n")
        A = read_matrix_market(path)
        dense = A.to_dense()
        assert dense[2, 0] == -1.5
        assert dense[0, 2] == -1.5
        assert A.nnz == 3

    def test_write_read_bit_identical(self, tmp_path):
        rng = np.random.default_rng(60)
        A = random_sparse(rng, 25, density=0.2)
        path = tmp_path / "rt.mtx"
        write_matrix_market(path, A)
        B = read_matrix_market(path)
        assert np.array_equal(A.values, B.values)
        assert np.array_equal(A.col_idx, B.col_idx)
        assert np.array_equal(A.row_ptr, B.row_ptr)

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "bad.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n"
                        "2 2 1\n1 oops 3.0\n")
        with pytest.raises(ParseError) as err:
            read_matrix_market(path)
        assert err.value.line == 3

    def test_nonsquare(self, tmp_path):
        path = tmp_path / "rect.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n"
                        "2 3 1\n1 1 1.0\n")
        with pytest.raises(NonSquare):
            read_matrix_market(path)

    def test_unsupported_field(self, tmp_path):
        path = tmp_path / "cplx.mtx"
        path.write_text("%%MatrixMarket matrix coordinate complex general\n"
                        "1 1 1\n1 1 1.0 0.0\n")
        with pytest.raises(UnsupportedField):
            read_matrix_market(path)
        path.write_text("%%MatrixMarket matrix coordinate pattern general\n"
                        "1 1 1\n1 1\n")
        with pytest.raises(UnsupportedField):
            read_matrix_market(path)

    def test_rhs_array_format(self, tmp_path):
        path = tmp_path / "b.mtx"
        write_rhs(path, np.array([1.5, -2.25, 3.0]))
        b = read_rhs(path)
        assert np.array_equal(b, [1.5, -2.25, 3.0])

    def test_rhs_plain_lines(self, tmp_path):
        path = tmp_path / "b.txt"
        path.write_text("1.0\n2.5\n-3.5\n")
        assert np.array_equal(read_rhs(path), [1.0, 2.5, -3.5])
