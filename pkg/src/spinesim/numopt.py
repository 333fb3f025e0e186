"""Dense convex quadratic-program kernel.

Solves problems of the form

    min  1/2 z' P z + f' z
    s.t. Aeq z  = beq
         Ain z <= bin

with a Mehrotra predictor-corrector interior-point method followed by an
active-set polish (a direct KKT solve on the detected active constraints),
which pushes residuals down to near machine precision on the small, dense
problems this package generates.  Also provides singular-value rank
analysis and a direct KKT solver for equality-constrained problems, used
as an independent oracle for the interior-point path.

All functions are pure and deterministic: identical inputs produce
identical outputs, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max_iterations"

# Absolute feasibility/stationarity thresholds a solution must meet before
# it may be labeled optimal.  Problems in this package are SI-scaled with
# O(1) data, so absolute thresholds are appropriate.
EQ_TOL = 1e-7
INEQ_TOL = 1e-7
STAT_TOL = 1e-6


class QpFormError(ValueError):
    """Malformed QP: inconsistent dimensions, non-finite data, or P not PSD."""


class KktSingularError(RuntimeError):
    """The KKT linear system is singular (no unique stationary point)."""


@dataclass
class QpProblem:
    """Convex QP data.  Empty constraint blocks are zero-row matrices."""

    P: np.ndarray
    f: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        if self.Aeq is None:
            self.Aeq = np.zeros((0, n))
            self.beq = np.zeros(0)
        else:
            self.Aeq = np.atleast_2d(np.asarray(self.Aeq, dtype=float))
            self.beq = np.asarray(self.beq, dtype=float).ravel()
        if self.Ain is None:
            self.Ain = np.zeros((0, n))
            self.bin = np.zeros(0)
        else:
            self.Ain = np.atleast_2d(np.asarray(self.Ain, dtype=float))
            self.bin = np.asarray(self.bin, dtype=float).ravel()

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def m_eq(self) -> int:
        return self.Aeq.shape[0]

    @property
    def m_in(self) -> int:
        return self.Ain.shape[0]

    def validate(self, check_psd: bool = True) -> None:
        n = self.n
        if self.P.shape != (n, n):
            raise QpFormError(f"P has shape {self.P.shape}, expected ({n}, {n})")
        if self.Aeq.shape[1] != n or self.beq.size != self.m_eq:
            raise QpFormError("equality block dimensions inconsistent with f")
        if self.Ain.shape[1] != n or self.bin.size != self.m_in:
            raise QpFormError("inequality block dimensions inconsistent with f")
        for name, arr in (("P", self.P), ("f", self.f), ("Aeq", self.Aeq),
                          ("beq", self.beq), ("Ain", self.Ain), ("bin", self.bin)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise QpFormError(f"{name} contains non-finite entries")
        scale = max(1.0, float(np.max(np.abs(self.P))) if self.P.size else 0.0)
        if self.P.size and np.max(np.abs(self.P - self.P.T)) > 1e-12 * scale:
            raise QpFormError("P is not symmetric to 1e-12 relative")
        if check_psd and n:
            # Cholesky of P + shift succeeds iff min eig >= -shift; this is the
            # PSD tolerance (min eig >= -1e-9 * max eig) without a full eigsolve.
            shift = 1e-9 * scale + 1e-300
            try:
                np.linalg.cholesky(self.P + shift * np.eye(n))
            except np.linalg.LinAlgError:
                raise QpFormError("P is not positive semidefinite") from None

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.f @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    status: str
    objective: float
    kkt_residual: float
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ineq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0


def numeric_rank(M: np.ndarray, rel_tol: float = 1e-10) -> tuple[int, np.ndarray]:
    """Rank of M as the count of singular values >= rel_tol * sigma_max.

    Returns (rank, singular values in descending order).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(M)):
        raise QpFormError("matrix contains non-finite entries")
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv >= rel_tol * sv[0])), sv


def solve_equality_kkt(P, f, Aeq=None, beq=None) -> np.ndarray:
    """Stationary point of an equality-constrained QP by direct KKT solve.

    Assembles [[P, Aeq'], [Aeq, 0]] and solves it in one shot.  Raises
    KktSingularError when the system has no unique solution.
    """
    P = np.asarray(P, dtype=float)
    f = np.asarray(f, dtype=float).ravel()
    n = f.size
    if Aeq is None or np.size(Aeq) == 0:
        Aeq = np.zeros((0, n))
        beq = np.zeros(0)
    else:
        Aeq = np.atleast_2d(np.asarray(Aeq, dtype=float))
        beq = np.asarray(beq, dtype=float).ravel()
    m = Aeq.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = Aeq.T
    K[n:, :n] = Aeq
    rhs = np.concatenate([-f, beq])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise KktSingularError(f"singular KKT system: {exc}") from exc
    resid = np.max(np.abs(K @ sol - rhs)) if rhs.size else 0.0
    if not np.all(np.isfinite(sol)) or resid > 1e-6 * (1.0 + np.max(np.abs(rhs))):
        raise KktSingularError("KKT solve did not produce a reliable solution")
    return sol[:n]


def _kkt_residuals(prob: QpProblem, z, y, lam):
    """(stationarity, eq residual, ineq violation, complementarity), inf norms."""
    r_stat = prob.P @ z + prob.f
    if prob.m_eq:
        r_stat = r_stat + prob.Aeq.T @ y
    if prob.m_in:
        r_stat = r_stat + prob.Ain.T @ lam
    stat = float(np.max(np.abs(r_stat))) if r_stat.size else 0.0
    eq = float(np.max(np.abs(prob.Aeq @ z - prob.beq))) if prob.m_eq else 0.0
    if prob.m_in:
        gap = prob.Ain @ z - prob.bin
        viol = float(max(0.0, np.max(gap)))
        comp = float(np.max(np.abs(lam * gap)))
    else:
        viol = comp = 0.0
    return stat, eq, viol, comp


def _solve_augmented(M: np.ndarray, A: np.ndarray, rhs1, rhs2):
    """Solve [[M, A'], [A, 0]] [dz; dy] = [rhs1; rhs2], with a regularized
    retry plus iterative refinement when the plain solve is unreliable."""
    n = M.shape[0]
    m = A.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = M
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([rhs1, rhs2])
    try:
        sol = np.linalg.solve(K, rhs)
        resid = np.max(np.abs(K @ sol - rhs)) if rhs.size else 0.0
        if np.all(np.isfinite(sol)) and resid <= 1e-8 * (1.0 + np.max(np.abs(rhs))):
            return sol[:n], sol[n:]
    except np.linalg.LinAlgError:
        pass
    # Regularized fallback: primal +delta, dual -delta, then refine.
    delta = 1e-11 * (1.0 + np.max(np.abs(M)))
    Kr = K.copy()
    Kr[:n, :n] += delta * np.eye(n)
    if m:
        Kr[n:, n:] -= delta * np.eye(m)
    sol = np.linalg.solve(Kr, rhs)
    for _ in range(3):
        sol = sol + np.linalg.solve(Kr, rhs - K @ sol)
    return sol[:n], sol[n:]


def _compress_equalities(Aeq, beq, feas_tol):
    """Reduce Aeq z = beq to an equivalent full-row-rank system via SVD.

    Returns (A_r, b_r, U_r) with A_r = S_r V_r' and y_orig = U_r y_r, or None
    when the system is inconsistent (beq outside the range of Aeq).
    """
    U, s, Vt = np.linalg.svd(Aeq, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s >= 1e-12 * s[0]))
    U_r = U[:, :rank]
    # Consistency: component of beq orthogonal to the range of Aeq.
    out_of_range = beq - U_r @ (U_r.T @ beq)
    if out_of_range.size and np.max(np.abs(out_of_range)) > feas_tol:
        return None
    A_r = s[:rank, None] * Vt[:rank]
    b_r = U_r.T @ beq
    return A_r, b_r, U_r


def _polish(prob: QpProblem, z, y, lam, s):
    """Active-set refinement: re-solve the KKT system treating the detected
    active inequalities as equalities.  Returns (z, y, lam) or None."""
    active = lam > s  # complementarity split at the crossover
    G = np.vstack([prob.Aeq, prob.Ain[active]])
    h = np.concatenate([prob.beq, prob.bin[active]])
    n = prob.n
    m = G.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = prob.P
    K[:n, n:] = G.T
    K[n:, :n] = G
    rhs = np.concatenate([-prob.f, h])
    sol = None
    try:
        cand = np.linalg.solve(K, rhs)
        if np.all(np.isfinite(cand)):
            resid = np.max(np.abs(K @ cand - rhs)) if rhs.size else 0.0
            if resid <= 1e-9 * (1.0 + np.max(np.abs(rhs))):
                sol = cand
    except np.linalg.LinAlgError:
        pass
    if sol is None:
        # Rank-deficient active set: fall back to a minimum-norm KKT solve.
        try:
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        except np.linalg.LinAlgError:
            return None
    if not np.all(np.isfinite(sol)):
        return None
    zp = sol[:n]
    mult = sol[n:]
    yp = mult[:prob.m_eq]
    lamp = np.zeros(prob.m_in)
    lamp[active] = np.maximum(mult[prob.m_eq:], 0.0)
    return zp, yp, lamp


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: int = 10000) -> QpSolution:
    """Solve a convex QP.

    Status is ``optimal`` only when the returned point passes KKT
    thresholds (equality residual <= 1e-7, inequality violation <= 1e-7
    absolute; stationarity <= 1e-6 relative to the objective scale);
    ``infeasible`` when a phase-1 certificate shows no feasible point
    exists; ``max_iterations`` otherwise.
    """
    problem.validate()
    # Normalize the objective so residual thresholds stay meaningful for
    # badly scaled costs (minimizer is invariant under P, f scaling).
    rho = max(1.0,
              float(np.max(np.abs(problem.P))) if problem.P.size else 0.0,
              float(np.max(np.abs(problem.f))) if problem.f.size else 0.0)
    if rho > 1.0:
        scaled = QpProblem(problem.P / rho, problem.f / rho,
                           problem.Aeq, problem.beq, problem.Ain, problem.bin)
        sol = _solve_qp_inner(scaled, tol, max_iter, allow_phase1=True)
        obj = problem.objective(sol.z) if np.all(np.isfinite(sol.z)) else np.nan
        return QpSolution(sol.z, sol.status, obj, sol.kkt_residual,
                          rho * sol.eq_multipliers, rho * sol.ineq_multipliers,
                          sol.iterations)
    return _solve_qp_inner(problem, tol, max_iter, allow_phase1=True)


class _NormalMatrixBuilder:
    """Accumulates M = P + Ain' diag(d) Ain.

    Rows with few nonzeros (bound and increment rows dominate the MPC
    problems here) are scattered index-wise; the remaining dense rows go
    through one GEMM.  Pure numpy, bit-deterministic.
    """

    _SPARSE_NNZ = 4

    def __init__(self, P: np.ndarray, Ain: np.ndarray):
        self.P = P
        self.n = P.shape[0]
        nnz = np.count_nonzero(Ain, axis=1)
        self.sparse_rows = np.flatnonzero(nnz <= self._SPARSE_NNZ)
        self.dense_rows = np.flatnonzero(nnz > self._SPARSE_NNZ)
        self.A_dense = np.ascontiguousarray(Ain[self.dense_rows])
        self.A_denseT = np.ascontiguousarray(self.A_dense.T)
        # Pack each sparse row's nonzeros into fixed-width padded arrays;
        # padded entries pair to value 0 at flat index 0, a harmless no-op.
        A_sp = Ain[self.sparse_rows]
        R, W = A_sp.shape[0], self._SPARSE_NNZ
        r_idx, c_idx = np.nonzero(A_sp)
        counts = nnz[self.sparse_rows]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(r_idx.size) - np.repeat(starts, counts)
        cols = np.zeros((R, W), dtype=np.intp)
        vals = np.zeros((R, W))
        cols[r_idx, slot] = c_idx
        vals[r_idx, slot] = A_sp[r_idx, c_idx]
        self.pair_rows = np.repeat(self.sparse_rows, W * W)
        self.pair_flat = (cols[:, :, None] * self.n + cols[:, None, :]).reshape(-1)
        self.pair_vals = (vals[:, :, None] * vals[:, None, :]).reshape(-1)

    def build(self, d: np.ndarray) -> np.ndarray:
        M = self.P.copy()
        if self.dense_rows.size:
            M += (self.A_denseT * d[self.dense_rows]) @ self.A_dense
        if self.pair_rows.size:
            np.add.at(M.reshape(-1), self.pair_flat,
                      d[self.pair_rows] * self.pair_vals)
        return M


def _solve_qp_inner(problem, tol, max_iter, allow_phase1):
    n, me, mi = problem.n, problem.m_eq, problem.m_in
    feas_tol = 1e-9 * (1.0 + (np.max(np.abs(problem.beq)) if me else 0.0))

    if me:
        compressed = _compress_equalities(problem.Aeq, problem.beq, max(feas_tol, EQ_TOL))
        if compressed is None:
            return QpSolution(np.full(n, np.nan), INFEASIBLE, np.nan, np.inf)
        A_r, b_r, U_r = compressed
    else:
        A_r = np.zeros((0, n))
        b_r = np.zeros(0)
        U_r = np.zeros((0, 0))

    P, f, Ain, bin_ = problem.P, problem.f, problem.Ain, problem.bin
    normal = _NormalMatrixBuilder(P, Ain) if mi else None

    # Starting point: least-squares equality solution, unit slacks/duals.
    if A_r.shape[0]:
        z = np.linalg.lstsq(A_r, b_r, rcond=None)[0]
    else:
        z = np.zeros(n)
    if mi:
        gap = bin_ - Ain @ z
        s = np.maximum(1.0, np.abs(gap))
        lam = np.ones(mi)
    else:
        s = np.zeros(0)
        lam = np.zeros(0)
    y = np.zeros(A_r.shape[0])

    best = (np.inf, z.copy(), y.copy(), lam.copy(), s.copy())
    iters = 0
    stall = 0
    prev_res = np.inf
    for iters in range(1, max_iter + 1):
        r_d = P @ z + f + A_r.T @ y + (Ain.T @ lam if mi else 0.0)
        r_p = A_r @ z - b_r
        r_i = (Ain @ z + s - bin_) if mi else np.zeros(0)
        mu = float(s @ lam / mi) if mi else 0.0

        res = max(
            np.max(np.abs(r_d)) if r_d.size else 0.0,
            np.max(np.abs(r_p)) if r_p.size else 0.0,
            np.max(np.abs(r_i)) if r_i.size else 0.0,
            mu,
        )
        if res < best[0]:
            best = (res, z.copy(), y.copy(), lam.copy(), s.copy())
        if res <= tol:
            break
        if not np.isfinite(res) or res > 1e14:
            break
        stall = stall + 1 if res > 0.9 * prev_res else 0
        if stall >= 15:
            break
        prev_res = res

        M = normal.build(lam / s) if mi else P

        # Affine (predictor) direction.
        if mi:
            rhs1 = -(r_d) - Ain.T @ ((-lam * s + lam * r_i) / s)
        else:
            rhs1 = -r_d
        dz_a, dy_a = _solve_augmented(M, A_r, rhs1, -r_p)
        if mi:
            ds_a = -r_i - Ain @ dz_a
            dlam_a = (-(lam * s) - lam * ds_a) / s
            a_p = _max_step(s, ds_a)
            a_d = _max_step(lam, dlam_a)
            mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dlam_a)) / mi
            sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0
            # Corrector with centering.
            r_c = lam * s + ds_a * dlam_a - sigma * mu
            rhs1 = -(r_d) - Ain.T @ ((-r_c + lam * r_i) / s)
            dz, dy = _solve_augmented(M, A_r, rhs1, -r_p)
            ds = -r_i - Ain @ dz
            dlam = (-r_c - lam * ds) / s
            alpha = 0.995 * min(_max_step(s, ds), _max_step(lam, dlam))
            alpha = min(1.0, alpha)
            z = z + alpha * dz
            y = y + alpha * dy
            s = s + alpha * ds
            lam = lam + alpha * dlam
        else:
            z = z + dz_a
            y = y + dy_a

    res, z, y, lam, s = best
    y = U_r @ y if me else y  # map multipliers back to the original rows
    if mi and res <= max(tol, 1e-6):
        polished = _polish(problem, z, y, lam, s)
        if polished is not None:
            stat_p, eq_p, viol_p, comp_p = _kkt_residuals(problem, *polished)
            if max(stat_p, eq_p, viol_p, comp_p) <= max(res, tol):
                z, y, lam = polished

    stat, eq, viol, comp = _kkt_residuals(problem, z, y, lam)
    kkt = max(stat, eq, viol, comp)
    stat_scale = 1.0 + (float(np.max(np.abs(f))) if f.size else 0.0)
    if eq <= EQ_TOL and viol <= INEQ_TOL and stat <= STAT_TOL * stat_scale:
        return QpSolution(z, OPTIMAL, problem.objective(z), kkt, y, lam, iters)

    # No certified optimum: decide between infeasible and max_iterations.
    if allow_phase1 and mi:
        t_star = _phase1_max_violation(problem, tol, max_iter)
        if t_star is not None and t_star > 10.0 * INEQ_TOL:
            return QpSolution(np.full(n, np.nan), INFEASIBLE, np.nan, kkt, y, lam, iters)
    return QpSolution(z, MAX_ITERATIONS, problem.objective(z), kkt, y, lam, iters)


def _phase1_max_violation(problem, tol, max_iter):
    """Minimum uniform inequality relaxation t with equalities held exactly.

    Solves  min 1/2 t^2  s.t.  Aeq z = beq,  Ain z - t <= bin.  A strictly
    positive optimum certifies primal infeasibility.  Returns None when the
    phase-1 solve itself fails.
    """
    n, me, mi = problem.n, problem.m_eq, problem.m_in
    P1 = np.zeros((n + 1, n + 1))
    P1[n, n] = 1.0
    f1 = np.zeros(n + 1)
    Aeq1 = np.hstack([problem.Aeq, np.zeros((me, 1))]) if me else None
    Ain1 = np.hstack([problem.Ain, -np.ones((mi, 1))])
    p1 = QpProblem(P1, f1, Aeq1, problem.beq if me else None, Ain1, problem.bin)
    sol = _solve_qp_inner(p1, tol, max_iter, allow_phase1=False)
    if sol.status != OPTIMAL:
        return None
    return float(sol.z[n])


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha in (0, 1] keeping v + alpha*dv >= 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))
