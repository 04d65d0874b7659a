"""Sparse operators, preconditioners and problem generation.

Holds the CSR system matrix, scalar ILU(k) with level-of-fill symbolic
analysis, the stationary and inner-GMRES preconditioner handles, the
projected operator (I - C C^T) A used by subspace-recycling solvers, a
convection-diffusion test-matrix generator and Matrix Market ingestion.
"""

import threading
import warnings

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import (
    DimensionMismatch,
    NonSquare,
    NotOrthonormal,
    ParseError,
    UnsupportedField,
    ZeroPivot,
)
from .smallalg import hessenberg_lsq

PROJECTOR_ORTHO_TOL = 1e-10


class MatvecCounter:
    """Thread-safe monotone counter of system-operator applications."""

    __slots__ = ("_count", "_lock")

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    @property
    def count(self):
        return self._count

    def add(self, n=1):
        with self._lock:
            self._count += n


class SparseMatrix:
    """Square real matrix in compressed sparse row storage.

    Column indices are strictly increasing within each row (hence no
    duplicates) and all values are finite.  Instances are immutable after
    construction and safe to share across workers.
    """

    def __init__(self, n, row_ptr, col_idx, values):
        row_ptr = np.asarray(row_ptr, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if row_ptr.shape != (n + 1,) or row_ptr[0] != 0 or row_ptr[-1] != len(values):
            raise DimensionMismatch("row_ptr must have length n+1 spanning the values")
        if np.any(np.diff(row_ptr) < 0):
            raise DimensionMismatch("row_ptr must be nondecreasing")
        if len(col_idx) != len(values):
            raise DimensionMismatch("col_idx and values must have equal length")
        if len(col_idx) and (col_idx.min() < 0 or col_idx.max() >= n):
            raise DimensionMismatch("column index out of range")
        for i in range(n):
            cols = col_idx[row_ptr[i]:row_ptr[i + 1]]
            if len(cols) > 1 and np.any(np.diff(cols) <= 0):
                raise DimensionMismatch(f"row {i} has unsorted or duplicate columns")
        if not np.all(np.isfinite(values)):
            raise DimensionMismatch("matrix values must be finite")
        self.n = n
        self.row_ptr = row_ptr
        self.col_idx = col_idx
        self.values = values
        self._csr = sp.csr_matrix((values, col_idx, row_ptr), shape=(n, n))

    @classmethod
    def from_coo(cls, n, rows, cols, vals):
        """Build from triplets; duplicate entries are summed."""
        m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(n, m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, D, drop_tol=0.0):
        D = np.asarray(D, dtype=float)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise NonSquare(f"expected square matrix, got {D.shape}")
        rows, cols = np.nonzero(np.abs(D) > drop_tol)
        return cls.from_coo(D.shape[0], rows, cols, D[rows, cols])

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(n, np.arange(n + 1), idx, np.ones(n))

    @property
    def nnz(self):
        return len(self.values)

    def matvec(self, x):
        """Exact CSR product A x; no counting (see LinearOperator)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionMismatch(f"vector length {x.shape} != {self.n}")
        return self._csr @ x

    def to_dense(self):
        return self._csr.toarray()

    def to_scipy(self):
        return self._csr

    def diagonal(self):
        return self._csr.diagonal()

    def row(self, i):
        sl = slice(self.row_ptr[i], self.row_ptr[i + 1])
        return self.col_idx[sl], self.values[sl]


class LinearOperator:
    """Counted apply-only operator of fixed dimension.

    ``apply`` is linear for non-variable operators.  Every call increments
    the shared matvec counter by the operator's cost (one for a plain system
    matrix; projected operators also cost one since the projection is free
    of system-matrix applications).
    """

    def __init__(self, apply_fn, dim, counter, cost=1, variable=False):
        self._apply = apply_fn
        self.dim = dim
        self.counter = counter
        self.cost = cost
        self.variable = variable

    def __call__(self, v):
        if self.cost:
            self.counter.add(self.cost)
        return self._apply(v)

    def apply_plain(self, v):
        """Apply without counting; for diagnostics and invariant checks."""
        return self._apply(v)


def as_operator(A, counter=None):
    """Wrap a SparseMatrix (or pass through a LinearOperator) with a counter."""
    if isinstance(A, LinearOperator):
        return A
    counter = counter or MatvecCounter()
    return LinearOperator(A.matvec, A.n, counter)


def spmv(A, x, counter=None):
    """Sparse matrix-vector product, incrementing ``counter`` by one."""
    y = A.matvec(x)
    if counter is not None:
        counter.add(1)
    return y


def projected_operator(A, C, ortho_tol=PROJECTOR_ORTHO_TOL):
    """Operator v -> A v - C (C^T (A v)) for an orthonormal C.

    With an empty C the operator is A itself.  Each application counts one
    matvec (through the wrapped operator's counter).
    """
    op = as_operator(A)
    if C is None or C.shape[1] == 0:
        return op
    C = np.asarray(C, dtype=float)
    defect = np.linalg.norm(C.T @ C - np.eye(C.shape[1]))
    if defect > ortho_tol:
        raise NotOrthonormal(f"projector basis deviates by {defect:.3e}")

    def apply_fn(v):
        w = op.apply_plain(v)
        return w - C @ (C.T @ w)

    return LinearOperator(apply_fn, op.dim, op.counter, cost=op.cost)


# ---------------------------------------------------------------------------
# Incomplete LU with level-of-fill
# ---------------------------------------------------------------------------


class IluFactorization:
    """Scalar ILU(k): unit-diagonal L and nonsingular U on the level-k pattern."""

    def __init__(self, level, L, U, pattern_nnz):
        self.level = level
        self.L = L
        self.U = U
        self.pattern_nnz = pattern_nnz

    def solve(self, v):
        """Apply U^{-1} L^{-1} v via two sparse triangular solves."""
        y = spsolve_triangular(self.L.to_scipy(), v, lower=True, unit_diagonal=True)
        return spsolve_triangular(self.U.to_scipy(), y, lower=False)


def _ilu_symbolic(A, level):
    """Level-of-fill pattern of each row as a sorted integer array."""
    n = A.n
    upper = []  # per factored row: (cols > diag, their levels)
    rows = []
    for i in range(n):
        cols, _ = A.row(i)
        lev = {int(j): 0 for j in cols}
        if i not in lev:
            lev[i] = 0  # diagonal always carried for the pivot
        pending = sorted(j for j in lev if j < i)
        pos = 0
        while pos < len(pending):
            kcol = pending[pos]
            pos += 1
            lk = lev[kcol]
            if lk > level:
                continue
            ucols, ulev = upper[kcol]
            for j, lkj in zip(ucols, ulev):
                fill = lk + lkj + 1
                if j in lev:
                    if fill < lev[j]:
                        lev[j] = fill
                elif fill <= level:
                    lev[j] = fill
                    if j < i:
                        # Keep the pending pivots ordered; new fill left of i
                        # must itself be eliminated.
                        lo, hi = pos, len(pending)
                        while lo < hi:
                            mid = (lo + hi) // 2
                            if pending[mid] < j:
                                lo = mid + 1
                            else:
                                hi = mid
                        pending.insert(lo, j)
        keep = sorted(j for j, l in lev.items() if l <= level)
        rows.append(np.array(keep, dtype=np.int64))
        up = [(j, lev[j]) for j in keep if j > i]
        upper.append((np.array([j for j, _ in up], dtype=np.int64),
                      np.array([l for _, l in up], dtype=np.int64)))
    return rows


def ilu_factor(A, level=0, pivot_tol=1e-14, shift_retry=True):
    """Incomplete LU factorization of A on its level-``level`` pattern.

    When the exact LU of A has no fill outside the pattern, L U reproduces A
    exactly.  A zero pivot triggers one retry with a diagonal shift of
    1e-8 * ||A||_inf (with a warning); a second failure raises ZeroPivot.
    """
    try:
        return _ilu_numeric(A, level, pivot_tol)
    except ZeroPivot:
        if not shift_retry:
            raise
    shift = 1e-8 * np.abs(A.to_scipy()).sum(axis=1).max()
    warnings.warn(
        f"ILU({level}) hit a zero pivot; retrying with diagonal shift {shift:.3e}",
        RuntimeWarning,
        stacklevel=2,
    )
    shifted = A.to_scipy() + shift * sp.identity(A.n, format="csr")
    shifted.sort_indices()
    A2 = SparseMatrix(A.n, shifted.indptr, shifted.indices, shifted.data)
    return _ilu_numeric(A2, level, pivot_tol)


def _ilu_numeric(A, level, pivot_tol):
    n = A.n
    pattern = _ilu_symbolic(A, level)
    scale = np.abs(A.values).max() if A.nnz else 1.0
    u_rows = []  # (cols >= i, values), diagonal first
    l_rows = []  # (cols < i, values)
    for i in range(n):
        cols_i = pattern[i]
        w = dict.fromkeys(cols_i.tolist(), 0.0)
        acols, avals = A.row(i)
        for j, v in zip(acols, avals):
            if j in w:
                w[j] = v
        for kcol in cols_i:
            if kcol >= i:
                break
            ucols, uvals = u_rows[kcol]
            piv = uvals[0]
            factor = w[kcol] / piv
            w[kcol] = factor
            for j, uv in zip(ucols[1:], uvals[1:]):
                if j in w:
                    w[j] -= factor * uv
        diag = w.get(i, 0.0)
        if abs(diag) < pivot_tol * scale:
            raise ZeroPivot(i)
        lc = cols_i[cols_i < i]
        uc = cols_i[cols_i >= i]
        l_rows.append((lc, np.array([w[j] for j in lc])))
        u_rows.append((uc, np.array([w[j] for j in uc])))

    def build(rows_list, unit_diag):
        ptr = [0]
        cols = []
        vals = []
        for i, (rc, rv) in enumerate(rows_list):
            if unit_diag:
                cols.extend(rc.tolist() + [i])
                vals.extend(rv.tolist() + [1.0])
            else:
                cols.extend(rc.tolist())
                vals.extend(rv.tolist())
            ptr.append(len(cols))
        return SparseMatrix(n, np.array(ptr), np.array(cols, dtype=np.int64),
                            np.array(vals))

    L = build(l_rows, unit_diag=True)
    U = build(u_rows, unit_diag=False)
    pattern_nnz = sum(len(p) for p in pattern)
    return IluFactorization(level, L, U, pattern_nnz)


# ---------------------------------------------------------------------------
# Preconditioner handles
# ---------------------------------------------------------------------------


class Preconditioner:
    """Base stationary handle: the identity."""

    kind = "identity"
    is_variable = False

    def apply(self, v):
        return np.array(v, dtype=float, copy=True)


class IdentityPreconditioner(Preconditioner):
    pass


class JacobiPreconditioner(Preconditioner):
    kind = "jacobi"

    def __init__(self, A):
        d = A.diagonal()
        if np.any(d == 0.0):
            raise ZeroPivot(int(np.argmin(np.abs(d))), "zero diagonal for Jacobi")
        self._inv_diag = 1.0 / d

    def apply(self, v):
        return self._inv_diag * v


class IluPreconditioner(Preconditioner):
    kind = "ilu"

    def __init__(self, factorization):
        self.factorization = factorization

    def apply(self, v):
        return self.factorization.solve(v)


class InnerGmresPreconditioner:
    """Variable handle: m_i un-restarted GMRES steps approximating A^{-1} v.

    Starts from the zero guess, right-preconditioned by the (usually
    stationary) inner handle.  Happy breakdown is an early success.  Inner
    system-matrix applications are counted through the wrapped operator.
    Per-call scratch only, hence re-entrant.
    """

    kind = "inner_gmres"
    is_variable = True

    def __init__(self, op, m_i, inner=None):
        self.op = as_operator(op)
        self.m_i = m_i
        self.inner = inner or IdentityPreconditioner()

    def apply(self, v):
        op, M = self.op, self.inner
        n = op.dim
        beta = np.linalg.norm(v)
        if beta == 0.0:
            return np.zeros(n)
        m = self.m_i
        V = np.empty((n, m + 1))
        Z = np.empty((n, m))
        H = np.zeros((m + 1, m))
        V[:, 0] = v / beta
        c = np.zeros(m + 1)
        c[0] = beta
        width = 0
        for j in range(m):
            z = M.apply(V[:, j])
            Z[:, j] = z
            w = op(z)
            wnorm = np.linalg.norm(w)
            for i in range(j + 1):
                hij = V[:, i] @ w
                w -= hij * V[:, i]
                H[i, j] += hij
            hnext = np.linalg.norm(w)
            H[j + 1, j] = hnext
            width = j + 1
            if hnext <= 1e-14 * max(wnorm, 1e-300):
                break  # happy breakdown: exact solve within the span
            V[:, j + 1] = w / hnext
        y, _ = hessenberg_lsq(H[:width + 1, :width], c[:width + 1])
        return Z[:, :width] @ y


def precondition_apply(P, v):
    """Apply a preconditioner handle to a vector (module-level convenience)."""
    return P.apply(v)


def inner_gmres_preconditioner(op, m_i, inner=None):
    return InnerGmresPreconditioner(op, m_i, inner=inner)


def build_preconditioner(kind, A, ilu_level=0):
    """Stationary handle from a configuration name."""
    if kind == "identity":
        return IdentityPreconditioner()
    if kind == "jacobi":
        return JacobiPreconditioner(A)
    if kind == "ilu":
        return IluPreconditioner(ilu_factor(A, ilu_level))
    raise ValueError(f"unknown preconditioner {kind!r}")


# ---------------------------------------------------------------------------
# Synthetic problem generation
# ---------------------------------------------------------------------------


def gen_convection_diffusion(grid, peclet, seed=None):
    """5-point upwind operator for -lap(u) + peclet*(u_x + u_y).

    Interior-point discretization on the unit square with homogeneous
    Dirichlet boundaries; ``grid`` = (nx, ny) interior points.  Nonsymmetric
    for peclet != 0.  The stencil is fully determined by (grid, peclet);
    ``seed`` is accepted for configuration parity and unused.
    """
    if np.isscalar(grid):
        nx = ny = int(grid)
    else:
        nx, ny = (int(g) for g in grid)
    if nx < 3 or ny < 3:
        raise DimensionMismatch("grid must be at least 3x3")
    hx = 1.0 / (nx + 1)
    hy = 1.0 / (ny + 1)
    pe = float(peclet)
    # Upwind convection: backward difference for positive flow, forward
    # otherwise, keeping the operator an M-matrix for all peclet.
    a_w = -1.0 / hx**2 - max(pe, 0.0) / hx
    a_e = -1.0 / hx**2 + min(pe, 0.0) / hx
    a_s = -1.0 / hy**2 - max(pe, 0.0) / hy
    a_n = -1.0 / hy**2 + min(pe, 0.0) / hy
    a_c = 2.0 / hx**2 + 2.0 / hy**2 + abs(pe) / hx + abs(pe) / hy
    rows, cols, vals = [], [], []

    def push(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for iy in range(ny):
        for ix in range(nx):
            r = iy * nx + ix
            push(r, r, a_c)
            if ix > 0:
                push(r, r - 1, a_w)
            if ix < nx - 1:
                push(r, r + 1, a_e)
            if iy > 0:
                push(r, r - nx, a_s)
            if iy < ny - 1:
                push(r, r + nx, a_n)
    return SparseMatrix.from_coo(nx * ny, rows, cols, vals)


# ---------------------------------------------------------------------------
# Matrix Market coordinate format
# ---------------------------------------------------------------------------


def read_matrix_market(path):
    """Read a real coordinate Matrix Market file into a SparseMatrix.

    Supports the general and symmetric qualifiers; symmetric storage is
    expanded to the full pattern and 1-based indices become 0-based.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError(1, "empty file")
    banner = lines[0].strip().split()
    if len(banner) != 5 or banner[0] != "%%MatrixMarket":
        raise ParseError(1, "malformed MatrixMarket banner")
    _, obj, fmt, field, symmetry = (t.lower() for t in banner)
    if obj != "matrix" or fmt != "coordinate":
        raise ParseError(1, f"unsupported object/format '{obj} {fmt}'")
    if field != "real":
        raise UnsupportedField(f"field '{field}' not supported (real only)")
    if symmetry not in ("general", "symmetric"):
        raise UnsupportedField(f"symmetry '{symmetry}' not supported")
    lineno = 1
    size_line = None
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text or text.startswith("%"):
            continue
        size_line = text
        break
    if size_line is None:
        raise ParseError(lineno, "missing size line")
    parts = size_line.split()
    if len(parts) != 3:
        raise ParseError(lineno, "size line must be 'rows cols nnz'")
    try:
        nrows, ncols, nnz = (int(p) for p in parts)
    except ValueError as exc:
        raise ParseError(lineno, str(exc)) from exc
    if nrows != ncols:
        raise NonSquare(f"matrix is {nrows}x{ncols}")
    rows, cols, vals = [], [], []
    seen = 0
    for off, raw in enumerate(lines[lineno:], start=lineno + 1):
        text = raw.strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        if len(parts) != 3:
            raise ParseError(off, "entry line must be 'i j value'")
        try:
            i = int(parts[0]) - 1
            j = int(parts[1]) - 1
            v = float(parts[2])
        except ValueError as exc:
            raise ParseError(off, str(exc)) from exc
        if not (0 <= i < nrows and 0 <= j < ncols):
            raise ParseError(off, "index out of range")
        rows.append(i)
        cols.append(j)
        vals.append(v)
        if symmetry == "symmetric" and i != j:
            rows.append(j)
            cols.append(i)
            vals.append(v)
        seen += 1
    if seen != nnz:
        raise ParseError(len(lines), f"expected {nnz} entries, found {seen}")
    return SparseMatrix.from_coo(nrows, rows, cols, vals)


def write_matrix_market(path, A, comment=None):
    """Write a SparseMatrix in general coordinate format, round-trip exact."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            fh.write(f"% {comment}\n")
        fh.write(f"{A.n} {A.n} {A.nnz}\n")
        for i in range(A.n):
            cols, vals = A.row(i)
            for j, v in zip(cols, vals):
                fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")


def read_rhs(path):
    """Read a right-hand side: MM array format or one value per line."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.readlines()
    if lines and lines[0].startswith("%%MatrixMarket"):
        banner = lines[0].strip().split()
        if len(banner) != 5:
            raise ParseError(1, "malformed MatrixMarket banner")
        _, obj, fmt, field, _sym = (t.lower() for t in banner)
        if obj != "matrix" or fmt != "array":
            raise ParseError(1, "rhs must use array format")
        if field != "real":
            raise UnsupportedField(f"field '{field}' not supported (real only)")
        body = [t.strip() for t in lines[1:] if t.strip() and not t.startswith("%")]
        if not body:
            raise ParseError(2, "missing size line")
        dims = body[0].split()
        if len(dims) != 2:
            raise ParseError(2, "size line must be 'rows cols'")
        nrows, ncols = int(dims[0]), int(dims[1])
        if ncols != 1:
            raise ParseError(2, "rhs must be a single column")
        try:
            values = np.array([float(t) for t in body[1:]])
        except ValueError as exc:
            raise ParseError(0, str(exc)) from exc
        if len(values) != nrows:
            raise ParseError(0, f"expected {nrows} values, found {len(values)}")
        return values
    body = [t.strip() for t in lines if t.strip() and not t.startswith(("%", "#"))]
    try:
        return np.array([float(t) for t in body])
    except ValueError as exc:
        raise ParseError(0, str(exc)) from exc


def write_rhs(path, b):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix array real general\n")
        fh.write(f"{len(b)} 1\n")
        for v in b:
            fh.write(f"{float(v)!r}\n")
