"""GMRES(m), FGMRES(m, m_i) and deflated-restarting variants.

Implements restarted right-preconditioned GMRES, the flexible Arnoldi cycle,
harmonic Ritz extraction (deflation strategies A and B), the closed-form
restart residual direction, and the deflated-restart driver shared by
GMRES-DR and FGMRES-DR, including the relative-discrepancy cold-restart
safeguard.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import RankDeficient, SingularHm, SingularPencil, NoConvergence
from .operators import (
    IdentityPreconditioner,
    InnerGmresPreconditioner,
    as_operator,
)
from .records import ConvergenceRecord, SolveReport
from .smallalg import (
    hessenberg_lsq,
    reduced_qr,
    small_generalized_eig,
    small_standard_eig,
)

BREAKDOWN_TOL = 1e-14
DEFAULT_SAFEGUARD_EPS = 0.05  # cold restart at 5% true-vs-lsq discrepancy
STAGNATION_CYCLES = 3


@dataclass
class ArnoldiState:
    """One (flexible) Arnoldi factorization: A Z = V Hbar, c the lsq rhs.

    ``Z`` is None for stationary right preconditioning where the solution
    basis is the preconditioned image of V and is never stored.
    """

    V: np.ndarray
    Z: np.ndarray | None
    Hbar: np.ndarray
    c: np.ndarray
    j: int

    @property
    def delta(self):
        """Trailing subdiagonal entry h_{j+1,j}."""
        return float(self.Hbar[self.j, self.j - 1])

    def square_block(self):
        return self.Hbar[: self.j, : self.j]


@dataclass
class DeflationSubspace:
    """Retained harmonic Ritz directions plus the orthonormalized restart map.

    ``Pk`` holds the raw (real-stored) eigenvector columns, ``Pk1`` the
    QR-orthonormalized (m+1) x (k+1) restart matrix whose extra column is the
    least-squares residual direction, ``f`` the solve H^{-T} e_m, and ``VtZ``
    the cached full V^T Z product when strategy A is in use.
    """

    Pk: np.ndarray
    Pk1: np.ndarray
    f: np.ndarray
    strategy: str
    values: np.ndarray
    VtZ: np.ndarray | None = None

    @property
    def k(self):
        return self.Pk1.shape[1] - 1


class _LsqQR:
    """Incrementally updated QR for min ||c - H y|| with a dense leading block.

    After a deflated restart the first k+1 rows of H are dense, so plain
    Givens recursion on the subdiagonal is not enough; this keeps H in
    factored form and appends one column (and one row) per Arnoldi step.
    """

    def __init__(self, H0):
        rows, cols = H0.shape
        if cols == 0:
            self.Q = np.eye(rows)
            self.R = np.zeros((rows, 0))
        else:
            self.Q, self.R = scipy.linalg.qr(H0)

    @property
    def width(self):
        return self.R.shape[1]

    def add_column(self, hcol):
        j = self.width
        rows = self.Q.shape[0]
        Q2 = np.zeros((rows + 1, rows + 1))
        Q2[:rows, :rows] = self.Q
        Q2[rows, rows] = 1.0
        R2 = np.zeros((rows + 1, j))
        R2[:rows, :] = self.R
        self.Q, self.R = scipy.linalg.qr_insert(
            Q2, R2, hcol, j, which="col", overwrite_qru=True, check_finite=False
        )

    def residual_norm(self, c):
        chat = self.Q.T @ c
        return float(np.linalg.norm(chat[self.width:]))

    def solve(self, c):
        chat = self.Q.T @ c
        w = self.width
        rho = float(np.linalg.norm(chat[w:]))
        if w == 0:
            return np.zeros(0), rho
        diag = np.abs(np.diag(self.R[:w, :w]))
        if diag.min() <= 1e-14 * max(diag.max(), 1e-300):
            y, *_ = np.linalg.lstsq(self.R[:w, :w], chat[:w], rcond=None)
        else:
            y = scipy.linalg.solve_triangular(self.R[:w, :w], chat[:w])
        return y, rho


def _extend_arnoldi(apply_op, Ms, V, Z, Hbar, j0, m, C=None, B=None,
                    reorth=True, step_cb=None):
    """Grow an Arnoldi factorization in place from width j0 up to m.

    apply_op is the (counted) operator; Ms an optional variable
    preconditioner producing the stored solution basis Z.  When C is given,
    every image is first orthogonalized against it and the coefficients are
    accumulated into B (the coupling block of subspace-recycling methods).
    Returns (width, breakdown).
    """
    for j in range(j0, m):
        v = V[:, j]
        if Ms is not None:
            z = Ms.apply(v)
            if Z is not None:
                Z[:, j] = z
        else:
            z = v
        w = apply_op(z)
        wnorm0 = np.linalg.norm(w)
        if C is not None and C.shape[1] > 0:
            t = C.T @ w
            w -= C @ t
            B[:, j] += t
        for i in range(j + 1):
            hij = V[:, i] @ w
            w -= hij * V[:, i]
            Hbar[i, j] += hij
        if reorth:
            if C is not None and C.shape[1] > 0:
                t = C.T @ w
                w -= C @ t
                B[:, j] += t
            for i in range(j + 1):
                hij = V[:, i] @ w
                w -= hij * V[:, i]
                Hbar[i, j] += hij
        hnext = np.linalg.norm(w)
        Hbar[j + 1, j] = hnext
        if hnext <= BREAKDOWN_TOL * max(wnorm0, 1e-300):
            if step_cb is not None:
                step_cb(j + 1)
            return j + 1, True
        V[:, j + 1] = w / hnext
        if step_cb is not None and step_cb(j + 1):
            return j + 1, False
    return m, False


def fgmres_cycle(A, Ms, r0, m, reorth=True, counter=None, step_cb=None):
    """One cycle of flexible Arnoldi (modified Gram-Schmidt) from r0.

    Returns the ArnoldiState; happy breakdown yields a truncated state.  A
    second orthogonalization pass is on by default, as used by the deflated
    solvers.
    """
    op = as_operator(A, counter)
    beta = np.linalg.norm(r0)
    if beta == 0.0:
        raise ValueError("fgmres_cycle requires a nonzero starting residual")
    n = op.dim
    V = np.empty((n, m + 1))
    Z = np.empty((n, m))
    Hbar = np.zeros((m + 1, m))
    V[:, 0] = r0 / beta
    Ms = Ms or IdentityPreconditioner()
    width, _ = _extend_arnoldi(op, Ms, V, Z, Hbar, 0, m, reorth=reorth,
                               step_cb=step_cb)
    c = np.zeros(width + 1)
    c[0] = beta
    return ArnoldiState(V[:, : width + 1], Z[:, :width], Hbar[: width + 1, :width],
                        c, width)


def gmres_solve(A, P, b, x0=None, *, m, tol=1e-8, max_matvecs=10_000,
                reorth=False, record=None, cycle_stop=None, counter=None):
    """Restarted GMRES(m) with a fixed right preconditioner.

    The least-squares residual steers the inner iteration; convergence is
    verified against the true residual at every cycle end.  Returns
    (x, SolveReport).
    """
    op = as_operator(A, counter)
    P = P or IdentityPreconditioner()
    if P.is_variable:
        raise ValueError("gmres_solve needs a stationary preconditioner")
    n = op.dim
    record = record if record is not None else ConvergenceRecord()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(True, 0, 0, 0, 0.0, 0.0, history=record)
    if x0 is None or not np.any(x0):
        x = np.zeros(n)
        r = b.astype(float, copy=True)
    else:
        x = np.array(x0, dtype=float, copy=True)
        r = b - op(x)
    start_count = op.counter.count
    rel_true = np.linalg.norm(r) / bnorm
    iterations = 0
    cycles = 0
    stop_reason = "converged"
    prev_cycle_rel = None
    stalled = 0
    while True:
        if rel_true <= tol:
            break
        if op.counter.count - start_count >= max_matvecs:
            stop_reason = "budget"
            break
        beta = np.linalg.norm(r)
        V = np.empty((n, m + 1))
        Hbar = np.zeros((m + 1, m))
        V[:, 0] = r / beta
        c = np.zeros(m + 1)
        c[0] = beta
        state = {"rel": rel_true}

        def step_cb(width):
            nonlocal iterations
            iterations += 1
            _, rho = hessenberg_lsq(Hbar[: width + 1, :width], c[: width + 1])
            state["rel"] = rho / bnorm
            record.append(cycles, iterations, op.counter.count, state["rel"])
            return (state["rel"] <= tol
                    or op.counter.count - start_count >= max_matvecs)

        def apply_op(v):
            return op(P.apply(v))

        width, breakdown = _extend_arnoldi(apply_op, None, V, None, Hbar, 0, m,
                                           reorth=reorth, step_cb=step_cb)
        y, rho = hessenberg_lsq(Hbar[: width + 1, :width], c[: width + 1])
        x += P.apply(V[:, :width] @ y)
        r = b - op(x)
        new_rel = np.linalg.norm(r) / bnorm
        record.append(cycles, iterations, op.counter.count, rho / bnorm,
                      true_rel=new_rel, event="restart")
        cycles += 1
        if cycle_stop is not None and cycle_stop(cycles, prev_cycle_rel, new_rel):
            rel_true = new_rel
            stop_reason = "triggered"
            break
        stalled = stalled + 1 if new_rel >= rel_true * (1 - 1e-12) else 0
        if breakdown and new_rel > tol and stalled:
            rel_true = new_rel
            stop_reason = "breakdown"
            break
        prev_cycle_rel = rel_true = new_rel
    converged = rel_true <= tol
    report = SolveReport(converged, iterations, op.counter.count - start_count,
                         cycles, rel_true, rel_true,
                         stop_reason=stop_reason if not converged else "converged",
                         stagnation=stalled >= STAGNATION_CYCLES, history=record)
    return x, report


def restart_residual_vector(state, y):
    """Closed-form direction of the small least-squares residual c - Hbar y.

    Returns (direction, scale) with direction = (-delta f, 1) and scale
    (omega - delta f.v) / (1 + delta^2 f.f), so that c - Hbar y equals
    direction * scale; here f = H^{-T} e_m, delta = h_{m+1,m}, v the leading
    m entries of c and omega its last entry.  Using this vector instead of
    the explicitly subtracted residual curbs rounding-error growth at
    restart (Rollin & Fichtner).
    """
    j = state.j
    H = state.square_block()
    delta = state.delta
    f = _solve_ht_em(H)
    v = state.c[:j]
    omega = state.c[j]
    direction = np.concatenate([-delta * f, [1.0]])
    scale = (omega - delta * (f @ v)) / (1.0 + delta**2 * (f @ f))
    return direction, float(scale)


def _solve_ht_em(H):
    em = np.zeros(H.shape[0])
    em[-1] = 1.0
    try:
        return np.linalg.solve(H.T, em)
    except np.linalg.LinAlgError as exc:
        raise SingularHm(str(exc)) from exc


def _augmented_restart_basis(Pk, f, delta, k_max):
    """Orthonormalize [[Pk; 0], (-delta f, 1)] into the restart map."""
    m = Pk.shape[0]
    kk = Pk.shape[1]
    if kk > k_max:
        raise RankDeficient(k_max, "deflation basis exceeds cycle size")
    raw = np.zeros((m + 1, kk + 1))
    raw[:m, :kk] = Pk
    raw[:m, kk] = -delta * f
    raw[m, kk] = 1.0
    Pk1, _ = reduced_qr(raw)
    return Pk1


def harmonic_ritz_standard(state, k, k_max=None):
    """Deflation strategy B: harmonic Ritz pairs from the standard problem.

    Solves (H + h_{m+1,m}^2 H^{-T} e_m e_m^T) g = lambda g for the k
    smallest-magnitude pairs (k+1 when a conjugate pair would split) and
    augments them with the restart residual direction.
    """
    j = state.j
    H = state.square_block()
    delta = state.delta
    f = _solve_ht_em(H)
    Hhat = H + delta**2 * np.outer(f, _unit(j, j - 1))
    k_max = k_max if k_max is not None else j
    request = min(k, k_max)
    pairs = small_standard_eig(Hhat, request)
    while len(pairs) > k_max and request > 1:
        request -= 1
        pairs = small_standard_eig(Hhat, request)
    Pk1 = _augmented_restart_basis(pairs.vectors, f, delta, k_max)
    return DeflationSubspace(Pk=pairs.vectors, Pk1=Pk1, f=f, strategy="B",
                             values=pairs.values)


def harmonic_ritz_strategy_a(state, k, cached_VtZ=None, k_max=None):
    """Deflation strategy A: harmonic Ritz pairs over the solution basis Z.

    Solves [H + h^2 f e_m^T] g = lambda [I  h f] V^T Z g, where the full
    (m+1) x m product V^T Z may be supplied from the previous cycle's cache;
    its leading block is then maintained by the restart recursion instead of
    full-length inner products.
    """
    if state.Z is None:
        raise ValueError("strategy A needs the stored solution basis Z")
    j = state.j
    VtZ = cached_VtZ if cached_VtZ is not None else state.V.T @ state.Z
    H = state.square_block()
    delta = state.delta
    f = _solve_ht_em(H)
    L = H + delta**2 * np.outer(f, _unit(j, j - 1))
    R = VtZ[:j, :] + delta * np.outer(f, VtZ[j, :])
    k_max = k_max if k_max is not None else j
    request = min(k, k_max)
    pairs = small_generalized_eig(L, R, request)
    while len(pairs) > k_max and request > 1:
        request -= 1
        pairs = small_generalized_eig(L, R, request)
    Pk1 = _augmented_restart_basis(pairs.vectors, f, delta, k_max)
    return DeflationSubspace(Pk=pairs.vectors, Pk1=Pk1, f=f, strategy="A",
                             values=pairs.values, VtZ=VtZ)


def _unit(n, i):
    e = np.zeros(n)
    e[i] = 1.0
    return e


def _dr_solve(A, P, b, x0=None, *, flexible, m, k, strategy="B", tol=1e-8,
              max_matvecs=50_000, safeguard_eps=DEFAULT_SAFEGUARD_EPS,
              reorth=True, record=None, state_hook=None, cycle_stop=None,
              counter=None):
    """Shared deflated-restart driver for GMRES-DR and FGMRES-DR."""
    if not 0 <= k < m:
        raise ValueError("deflation size k must satisfy 0 <= k < m")
    op = as_operator(A, counter)
    n = op.dim
    record = record if record is not None else ConvergenceRecord()
    P = P or IdentityPreconditioner()
    if flexible:
        Ms = P
        apply_op = op
        store_z = True
    else:
        if P.is_variable:
            raise ValueError("non-flexible solve needs a stationary preconditioner")
        # Strategy A needs V^T Z, so the preconditioned basis is stored
        # explicitly; strategy B keeps Z implicit and halves the memory.
        store_z = strategy == "A"
        if store_z:
            Ms = P
            apply_op = op
        else:
            Ms = None

            def apply_op(v):
                return op(P.apply(v))

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(True, 0, 0, 0, 0.0, 0.0, history=record)
    if x0 is None or not np.any(x0):
        x = np.zeros(n)
        r = b.astype(float, copy=True)
    else:
        x = np.array(x0, dtype=float, copy=True)
        r = b - op(x)
    start_count = op.counter.count
    rel_true = np.linalg.norm(r) / bnorm
    rel_lsq = rel_true
    iterations = 0
    cycles = 0
    cold_restarts = 0
    stalled = 0
    stop_reason = "converged"
    prev_cycle_rel = None
    carry = None  # completed-cycle state feeding the next deflated restart
    while True:
        if rel_true <= tol:
            break
        if op.counter.count - start_count >= max_matvecs:
            stop_reason = "budget"
            break
        V = np.empty((n, m + 1))
        Z = np.empty((n, m)) if store_z else None
        Hbar = np.zeros((m + 1, m))
        c = np.zeros(m + 1)
        VtZ_head = None
        if carry is None:
            beta = np.linalg.norm(r)
            V[:, 0] = r / beta
            c[0] = beta
            j0 = 0
        else:
            prev_state, prev_VtZ = carry
            try:
                if strategy == "A":
                    defl = harmonic_ritz_strategy_a(prev_state, k,
                                                    cached_VtZ=prev_VtZ,
                                                    k_max=prev_state.j - 1)
                else:
                    defl = harmonic_ritz_standard(prev_state, k,
                                                  k_max=prev_state.j - 1)
            except (SingularHm, RankDeficient, SingularPencil, NoConvergence):
                carry = None
                cold_restarts += 1
                record.mark_event("cold_restart")
                continue
            Pk1 = defl.Pk1
            kk = defl.k
            Pbar_k = Pk1[:m, :kk]
            V[:, : kk + 1] = prev_state.V @ Pk1
            if store_z:
                Z[:, :kk] = prev_state.Z @ Pbar_k
            Hbar[: kk + 1, :kk] = Pk1.T @ prev_state.Hbar @ Pbar_k
            c[: kk + 1] = V[:, : kk + 1].T @ r
            if strategy == "A":
                VtZ_head = (Pk1.T @ defl.VtZ) @ Pbar_k
            j0 = kk
        lsq = _LsqQR(Hbar[: j0 + 1, :j0])

        def step_cb(width):
            nonlocal iterations
            iterations += 1
            lsq.add_column(Hbar[: width + 1, width - 1])
            rel = lsq.residual_norm(c[: width + 1]) / bnorm
            record.append(cycles, iterations, op.counter.count, rel)
            return rel <= tol or op.counter.count - start_count >= max_matvecs

        width, breakdown = _extend_arnoldi(apply_op, Ms, V, Z, Hbar, j0, m,
                                           reorth=reorth, step_cb=step_cb)
        y, rho = lsq.solve(c[: width + 1])
        if store_z:
            x += Z[:, :width] @ y
        else:
            x += P.apply(V[:, :width] @ y)
        r = b - op(x)
        new_rel = np.linalg.norm(r) / bnorm
        rel_lsq = rho / bnorm
        record.append(cycles, iterations, op.counter.count, rel_lsq,
                      true_rel=new_rel, event="restart")
        cycles += 1
        cycle_state = ArnoldiState(V[:, : width + 1],
                                   Z[:, :width] if store_z else None,
                                   Hbar[: width + 1, :width],
                                   c[: width + 1], width)
        if state_hook is not None:
            state_hook(cycle_state, cycles)
        stalled = stalled + 1 if new_rel >= rel_true * (1 - 1e-12) else 0
        if cycle_stop is not None and cycle_stop(cycles, prev_cycle_rel, new_rel):
            rel_true = new_rel
            stop_reason = "triggered"
            break
        prev_cycle_rel = rel_true = new_rel
        if rel_true <= tol:
            break
        # Cold-restart safeguard: when rounding has detached the cheap
        # least-squares residual from the true one, drop all spectral
        # information and restart from the explicit residual.
        discrepancy = abs(new_rel - rel_lsq) / new_rel if new_rel > 0 else 0.0
        if discrepancy > safeguard_eps:
            carry = None
            cold_restarts += 1
            record.mark_event("cold_restart")
            continue
        if breakdown or width < m:
            # A truncated basis cannot be compacted consistently; restart
            # plainly from the current residual.
            carry = None
            continue
        if strategy == "A" and k > 0:
            VtZ_full = np.empty((m + 1, m))
            kk = j0
            if VtZ_head is not None:
                VtZ_full[: kk + 1, :kk] = VtZ_head
                VtZ_full[kk + 1:, :kk] = V[:, kk + 1:].T @ Z[:, :kk]
                VtZ_full[:, kk:] = V.T @ Z[:, kk:]
            else:
                VtZ_full[:] = V.T @ Z
            carry = (cycle_state, VtZ_full)
        else:
            carry = (cycle_state, None)
    converged = rel_true <= tol
    report = SolveReport(converged, iterations, op.counter.count - start_count,
                         cycles, rel_lsq, rel_true,
                         stop_reason=stop_reason if not converged else "converged",
                         cold_restarts=cold_restarts,
                         stagnation=stalled >= STAGNATION_CYCLES,
                         history=record)
    return x, report


def gmresdr_solve(A, P, b, x0=None, *, m, k, strategy="B", tol=1e-8,
                  max_matvecs=50_000, safeguard_eps=DEFAULT_SAFEGUARD_EPS,
                  reorth=True, record=None, state_hook=None, cycle_stop=None,
                  counter=None):
    """GMRES-DR(m, k) with a stationary right preconditioner."""
    return _dr_solve(A, P, b, x0, flexible=False, m=m, k=k, strategy=strategy,
                     tol=tol, max_matvecs=max_matvecs,
                     safeguard_eps=safeguard_eps, reorth=reorth, record=record,
                     state_hook=state_hook, cycle_stop=cycle_stop,
                     counter=counter)


def fgmresdr_solve(A, Ms, b, x0=None, *, m, k, m_i=None, strategy="B",
                   tol=1e-8, max_matvecs=50_000,
                   safeguard_eps=DEFAULT_SAFEGUARD_EPS, reorth=True,
                   record=None, state_hook=None, cycle_stop=None,
                   counter=None):
    """FGMRES-DR(m, m_i, k) with a variable right preconditioner.

    When ``Ms`` is stationary (or None) and ``m_i`` is given, an inner
    un-restarted GMRES(m_i) preconditioner is built around it, sharing the
    operator's matvec counter.
    """
    op = as_operator(A, counter)
    if (Ms is None or not Ms.is_variable) and m_i is not None:
        Ms = InnerGmresPreconditioner(op, m_i, inner=Ms)
    return _dr_solve(op, Ms, b, x0, flexible=True, m=m, k=k, strategy=strategy,
                     tol=tol, max_matvecs=max_matvecs,
                     safeguard_eps=safeguard_eps, reorth=reorth, record=record,
                     state_hook=state_hook, cycle_stop=cycle_stop)
