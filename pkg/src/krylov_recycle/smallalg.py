"""Dense small-matrix kernels used inside every solver cycle.

All routines operate on plain numpy arrays (row-major, float64) of modest
size (a few hundred at most): reduced QR, Hessenberg least squares by Givens
rotations, small standard/generalized eigensolvers with conjugate-pair-aware
real storage, principal angles and the Grassmann distance between subspaces.

Everything here is a pure function of its inputs and safe to call
concurrently.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NotOrthonormal,
    RankDeficient,
    SingularPencil,
    SingularTriangle,
)

# Default tolerances; callers may override per call.
QR_RANK_TOL = 1e-14
TRIANGLE_TOL = 1e-14
ORTHONORMAL_TOL = 1e-10
EIG_SIZE_CAP = 512


@dataclass
class EigenPairSet:
    """Eigenpairs sorted by ascending magnitude, kept in real storage.

    ``values`` is a complex vector.  ``vectors`` is a real matrix: a real
    eigenvalue owns one column holding its eigenvector; a complex-conjugate
    pair owns two consecutive columns holding the real and imaginary parts
    of the unit-norm eigenvector of the member with positive imaginary part.
    Requesting k pairs may return k+1 when the cut would split a conjugate
    pair.
    """

    values: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.values)

    def complex_pairs(self):
        """Yield (value, complex eigenvector) for each retained eigenvalue."""
        i = 0
        n = len(self.values)
        while i < n:
            lam = self.values[i]
            if lam.imag == 0.0:
                yield lam, self.vectors[:, i].astype(complex)
                i += 1
            else:
                g = self.vectors[:, i] + 1j * self.vectors[:, i + 1]
                yield lam, g.conj()  # member with negative imaginary part
                yield lam.conjugate(), g
                i += 2


@dataclass
class SubspaceDistance:
    """Grassmann distance d_p over p principal angles, with d_p/sqrt(p)."""

    d_p: float
    p: int
    d_tilde: float


def reduced_qr(M, rank_tol=QR_RANK_TOL):
    """Reduced QR factorization with a nonnegative-diagonal R.

    Returns (Q, R) with Q of shape (n, k), R upper triangular (k, k) and
    QR = M.  Raises RankDeficient(j) as soon as |R[j, j]| drops below
    rank_tol * ||M||_F, signalling collapse of a deflation subspace.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < M.shape[1]:
        raise DimensionMismatch(f"expected a tall matrix, got shape {M.shape}")
    if M.shape[1] == 0:
        return M.copy(), np.zeros((0, 0))
    Q, R = np.linalg.qr(M)
    signs = np.sign(np.diag(R))
    signs[signs == 0.0] = 1.0
    Q = Q * signs
    R = signs[:, None] * R
    fro = np.linalg.norm(M)
    if fro == 0.0:
        raise RankDeficient(0)
    for j in range(R.shape[0]):
        if abs(R[j, j]) < rank_tol * fro:
            raise RankDeficient(j)
    return Q, R


def hessenberg_lsq(Hbar, c, triangle_tol=TRIANGLE_TOL):
    """Solve min_y ||c - Hbar y||_2 for an upper Hessenberg Hbar by Givens.

    Hbar has shape (j+1, j) and c length j+1.  Returns (y, rho) where rho is
    the least-squares residual norm.  Raises SingularTriangle when the
    reduced triangle carries a negligible diagonal entry (solver breakdown).
    """
    Hbar = np.asarray(Hbar, dtype=float)
    c = np.asarray(c, dtype=float)
    rows, j = Hbar.shape
    if rows != j + 1 or c.shape != (j + 1,):
        raise DimensionMismatch(
            f"need ({j + 1},{j}) Hessenberg and rhs of length {j + 1}"
        )
    if j == 0:
        return np.zeros(0), float(abs(c[0]))
    R = Hbar.copy()
    g = c.copy()
    scale = np.linalg.norm(Hbar)
    for col in range(j):
        a, b = R[col, col], R[col + 1, col]
        r = np.hypot(a, b)
        if r == 0.0:
            cs, sn = 1.0, 0.0
        else:
            cs, sn = a / r, b / r
        # Rotate rows (col, col+1) over the remaining columns and the rhs.
        upper = R[col, col:].copy()
        lower = R[col + 1, col:].copy()
        R[col, col:] = cs * upper + sn * lower
        R[col + 1, col:] = -sn * upper + cs * lower
        g[col], g[col + 1] = cs * g[col] + sn * g[col + 1], -sn * g[col] + cs * g[col + 1]
    for i in range(j):
        if abs(R[i, i]) < triangle_tol * scale:
            raise SingularTriangle(i)
    y = np.zeros(j)
    for i in range(j - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:j] @ y[i + 1:]) / R[i, i]
    return y, float(abs(g[j]))


def _sorted_eig_indices(values):
    """Ascending |value|; ties broken by real part, then imaginary part."""
    return np.lexsort((values.imag, values.real, np.abs(values)))


def _fix_phase(g):
    """Rotate a unit eigenvector so its largest entry is real positive."""
    i = int(np.argmax(np.abs(g)))
    pivot = g[i]
    if pivot == 0.0:
        return g
    return g * (np.conj(pivot) / abs(pivot))


def _select_pairs(values, vectors, k):
    """Pick the k smallest-|value| eigenpairs into real pair-aware storage.

    Grows the selection by one when the cut would split a conjugate pair.
    """
    m = len(values)
    k = min(k, m)
    order = _sorted_eig_indices(values)
    # Grow the cut until the selection is closed under conjugation, so a
    # conjugate pair is never split (usually at most one extra pair member).
    count = k
    while count < m:
        imag = values[order[:count]].imag
        if np.count_nonzero(imag < 0) == np.count_nonzero(imag > 0):
            break
        count += 1
    sel = order[:count]
    out_vals = np.empty(count, dtype=complex)
    out_vecs = np.empty((vectors.shape[0], count))
    i = 0
    while i < count:
        lam = values[sel[i]]
        g = vectors[:, sel[i]]
        if lam.imag == 0.0:
            gr = np.real(g)
            nrm = np.linalg.norm(gr)
            if nrm > 0:
                gr = gr / nrm
            if gr[np.argmax(np.abs(gr))] < 0:
                gr = -gr
            out_vals[i] = lam
            out_vecs[:, i] = gr
            i += 1
        else:
            # Conjugate pair occupies slots i, i+1; store Re/Im of the
            # positive-imaginary member's unit eigenvector.
            if lam.imag < 0:
                lam_plus, g_plus = np.conj(lam), np.conj(g)
            else:
                lam_plus, g_plus = lam, g
            g_plus = g_plus / np.linalg.norm(g_plus)
            g_plus = _fix_phase(g_plus)
            out_vals[i] = np.conj(lam_plus)
            out_vals[i + 1] = lam_plus
            out_vecs[:, i] = np.real(g_plus)
            out_vecs[:, i + 1] = np.imag(g_plus)
            i += 2
    return EigenPairSet(values=out_vals, vectors=out_vecs)


def small_standard_eig(M, k, size_cap=EIG_SIZE_CAP):
    """k eigenpairs of smallest magnitude of a small dense real matrix.

    Backed by the LAPACK Hessenberg-reduction + shifted-QR driver.  Complex
    conjugate pairs are never split: the result may hold k+1 pairs.
    """
    M = np.asarray(M, dtype=float)
    m = M.shape[0]
    if M.shape != (m, m):
        raise DimensionMismatch(f"expected square matrix, got {M.shape}")
    if m > size_cap:
        raise DimensionMismatch(f"matrix order {m} exceeds cap {size_cap}")
    if k > m:
        raise DimensionMismatch(f"requested {k} pairs from order-{m} matrix")
    try:
        values, vectors = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    values = np.asarray(values, dtype=complex)
    vectors = np.asarray(vectors, dtype=complex)
    return _select_pairs(values, vectors, k)


def small_generalized_eig(L, Rm, k, size_cap=EIG_SIZE_CAP):
    """k smallest-|lambda| eigenpairs of L g = lambda Rm g.

    Solved through the inverted problem Rm g = (1/lambda) L g, i.e. the
    largest eigenvalues of L^{-1} Rm, which avoids forming ill-conditioned
    products and needs no QZ decomposition.  When L is singular the swapped
    direction Rm^{-1} L is used instead; if both are singular the pencil is
    declared singular.
    """
    L = np.asarray(L, dtype=float)
    Rm = np.asarray(Rm, dtype=float)
    m = L.shape[0]
    if L.shape != (m, m) or Rm.shape != (m, m):
        raise DimensionMismatch("pencil matrices must be square and equal-sized")
    if m > size_cap:
        raise DimensionMismatch(f"matrix order {m} exceeds cap {size_cap}")
    try:
        T = np.linalg.solve(L, Rm)
    except np.linalg.LinAlgError:
        T = None
    if T is not None:
        try:
            mu, vectors = np.linalg.eig(T)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence(str(exc)) from exc
        # lambda = 1/mu; mu = 0 maps to an infinite eigenvalue, never among
        # the smallest, so it is naturally discarded by the largest-|mu| pick.
        order = np.argsort(-np.abs(mu))
        keep = order[np.abs(mu[order]) > 0]
        if len(keep) < k:
            raise SingularPencil("fewer finite eigenvalues than requested")
        values = 1.0 / mu[keep]
        return _select_pairs(values, vectors[:, keep], k)
    # L singular: fall back to eig(Rm^{-1} L), eigenvalues are lambda directly.
    try:
        T = np.linalg.solve(Rm, L)
    except np.linalg.LinAlgError as exc:
        raise SingularPencil("both pencil matrices are singular") from exc
    try:
        lam, vectors = np.linalg.eig(T)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return _select_pairs(lam, vectors, k)


def principal_angles(C1, C2, ortho_tol=ORTHONORMAL_TOL):
    """Principal angles between the column spans of two orthonormal bases.

    Computed from the singular values of C1^T C2, clamped into [0, 1];
    returned ascending, length min(k1, k2).
    """
    C1 = np.atleast_2d(np.asarray(C1, dtype=float))
    C2 = np.atleast_2d(np.asarray(C2, dtype=float))
    if C1.shape[0] != C2.shape[0]:
        raise DimensionMismatch("bases must share the ambient dimension")
    for name, C in (("C1", C1), ("C2", C2)):
        k = C.shape[1]
        if k == 0:
            continue
        defect = np.linalg.norm(C.T @ C - np.eye(k))
        if defect > ortho_tol:
            raise NotOrthonormal(f"{name} deviates from orthonormality by {defect:.3e}")
    p = min(C1.shape[1], C2.shape[1])
    if p == 0:
        return np.zeros(0)
    sigma = np.linalg.svd(C1.T @ C2, compute_uv=False)
    sigma = np.clip(sigma[:p], 0.0, 1.0)
    return np.arccos(sigma)


def grassmann_distance(C1, C2, ortho_tol=ORTHONORMAL_TOL):
    """Grassmann distance between subspaces of possibly different dimension.

    d_p = sqrt(sum of squared principal angles) over p = min(k1, k2) angles,
    plus the normalized variant d_p / sqrt(p).
    """
    theta = principal_angles(C1, C2, ortho_tol=ortho_tol)
    p = len(theta)
    d_p = float(np.sqrt(np.sum(theta**2)))
    d_tilde = d_p / np.sqrt(p) if p > 0 else 0.0
    return SubspaceDistance(d_p=d_p, p=p, d_tilde=float(d_tilde))
