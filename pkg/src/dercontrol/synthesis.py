"""Robust affine policy synthesis (upper bound) and the moment-relaxation lower bound.

Both programs optimize the free entries of ``Q`` in ``u = Q xi``.  Internally
the disturbance is centered, ``xi = T xi_c`` with ``xi_c = (1, xi - mu)``, and
the policy becomes ``Q_c = Q T``.  The change of variables is exact and keeps
the sparsity mask: only the constant column mixes, and it is always free.  In
centered coordinates the moment matrix is ``blockdiag(1, Cov)``, so under
independence the objective Hessian splits into one block per disturbance
column.

Free entries that the data pin to zero are removed before solving:
* rows of inactive channels (storage that cannot move, inverters with s = 0);
* columns of coordinates whose support has zero width (their centered value is
  identically zero).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .assembly import FAMILIES, FAMILY_KIND, LiftedSystem, box_to_polytope, build_policy_mask, support_matrix
from .qp import INFEASIBLE, OPTIMAL, QPProblem, QPSettings, solve_qp
from .scenario import BoxSupport, DisturbanceModel, MomentMatrix, PolytopeSupport, check_assumption1

logger = logging.getLogger(__name__)

#: above this many variables + inequalities the sparse KKT path is used
SPARSE_THRESHOLD = 1500


class SynthesisError(RuntimeError):
    """The solver failed to converge; ``report`` holds its final residuals."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InfeasibleProgramError(SynthesisError):
    """The robust program has no feasible policy.

    ``rows`` lists ``(family, bus label, t)`` for the constraint rows judged
    most responsible, most suspicious first.
    """

    def __init__(self, message, rows, report=None):
        super().__init__(message, report)
        self.rows = list(rows)
        self.family = self.rows[0][0] if self.rows else None


@dataclass
class SolverReport:
    status: str
    iterations: int
    primal_res: float
    ineq_res: float
    dual_res: float
    comp_res: float
    n_vars: int
    n_eq: int
    n_ineq: int
    seconds: float
    message: str = ""


@dataclass
class AffinePolicy:
    """``u = Q xi`` with ``Q`` zero outside the decentralized mask."""

    Q: np.ndarray
    J_in: float
    solver_report: SolverReport | None
    n: int
    T: int
    delta: float

    @property
    def mask(self):
        return build_policy_mask(self.n, self.T)

    def inputs(self, xi):
        """Inputs for one trajectory ``(N_xi,)`` or a batch ``(k, N_xi)``."""
        return np.asarray(xi) @ self.Q.T

    @classmethod
    def zero(cls, ls: LiftedSystem):
        return cls(np.zeros((ls.N_u, ls.N_xi)), float("nan"), None, ls.n, ls.T, ls.delta)


@dataclass
class LowerBoundResult:
    J_out: float
    Q_relaxed: np.ndarray
    Z: np.ndarray
    solver_report: SolverReport
    assumption1_certified: bool


@dataclass
class RowDual:
    """Worst case of one affine row ``a' xi`` over the support.

    ``a + nu e1 + W' pi = 0`` with ``pi >= 0``; ``margin = nu = -sup``.
    """

    sup: float
    nu: float
    pi: np.ndarray

    @property
    def margin(self):
        return self.nu


@dataclass
class RobustCounterpart:
    """Per-row certificates ``Z = nu e1' + Pi' W`` for all constraint rows.

    Rows are the constraint rows; ``Pi[r]`` is the multiplier vector of row ``r``.
    """

    nu: np.ndarray
    Pi: sp.csr_matrix
    W: np.ndarray
    residual: float

    def certifies(self, tol=1e-8):
        pi_ok = self.Pi.nnz == 0 or self.Pi.data.min() >= 0
        return bool(pi_ok and self.nu.min() >= -tol and self.residual <= tol)


# ---------------------------------------------------------------------------
# moments and layout


@dataclass
class _Moments:
    mu: np.ndarray          # N_xi - 1
    var: np.ndarray         # N_xi - 1
    cov: np.ndarray | None  # dense covariance when not diagonal
    diagonal: bool

    def centered(self):
        """``blockdiag(1, Cov)`` as a sparse matrix."""
        body = sp.diags(self.var) if self.diagonal else sp.csr_matrix(self.cov)
        return sp.block_diag([sp.identity(1), body], format="csr")


def _moments(dm: DisturbanceModel, M) -> _Moments:
    if M is None:
        return _Moments(dm.mean[1:].copy(), dm.var[1:].copy(), None, True)
    M = np.asarray(M.M if isinstance(M, MomentMatrix) else M, dtype=float)
    if M.shape != (dm.N_xi, dm.N_xi) or abs(M[0, 0] - 1.0) > 1e-12:
        raise ValueError("moment matrix must be N_xi x N_xi with M[0, 0] = 1")
    mu = M[1:, 0].copy()
    cov = M[1:, 1:] - np.outer(mu, mu)
    tol = 1e-13 * max(1.0, np.abs(M).max())
    cov[np.abs(cov) <= tol] = 0.0
    var = np.diag(cov).copy()
    if np.any(var < 0):
        raise ValueError("moment matrix has negative variance")
    diagonal = not np.any(cov - np.diag(var))
    return _Moments(mu, var, None if diagonal else cov, diagonal)


class _Layout:
    """Free entries of the centered policy, grouped by disturbance column."""

    def __init__(self, ls: LiftedSystem, cols):
        free = ls.S_mask & ls.input_active[:, None]
        self.shape = (ls.N_u, ls.N_xi)
        self.cols = np.asarray(cols, dtype=int)
        self.rows = [np.flatnonzero(free[:, j]) for j in self.cols]
        sizes = np.array([r.size for r in self.rows], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.nq = int(self.offsets[-1])

    def scatter(self, q):
        Qc = np.zeros(self.shape)
        for k, j in enumerate(self.cols):
            Qc[self.rows[k], j] = q[self.offsets[k]:self.offsets[k + 1]]
        return Qc


def _kept_columns(dm: DisturbanceModel):
    box = dm.box()
    uncertain = np.flatnonzero(box.upper - box.lower > 0) + 1
    return np.concatenate([[0], uncertain])


def _centered_rows(G, H0, mu):
    """Row data in centered coordinates: ``G`` is unchanged, ``H0 -> H0 T``."""
    Hc = H0.tolil(copy=True)
    h0 = np.asarray(H0[:, 0].todense()).ravel() + H0[:, 1:] @ mu
    Hc[:, 0] = h0[:, None]
    return G.tocsc(), Hc.tocsc(), h0


def _uncenter(Qc, mu):
    Q = Qc.copy()
    Q[:, 0] = Qc[:, 0] - Qc[:, 1:] @ mu
    return Q


# ---------------------------------------------------------------------------
# objective


def _objective(ls: LiftedSystem, lay: _Layout, mom: _Moments, x0):
    """``(H, g, const)`` with expected cost ``1/2 q'Hq + g'q + const``."""
    sig = np.diag(ls.Sigma)
    P = ls.L_u.T @ (sig[:, None] * ls.L_u)
    Lc = ls.L_xi.copy()
    Lc[:, 0] = ls.L_xi[:, 1:] @ mom.mu
    K = (Lc.T * sig) @ ls.L_u                       # N_xi x N_u
    Mc = mom.centered()
    grad = 2.0 * (Mc.T @ K).T                       # N_u x N_xi
    grad[:, 0] += ls.c @ ls.Bb
    g = np.concatenate([grad[r, j] for r, j in zip(lay.rows, lay.cols)])
    if mom.diagonal:
        blocks = [2.0 * Mc[j, j] * P[np.ix_(r, r)] for r, j in zip(lay.rows, lay.cols)]
        H = sp.block_diag(blocks, format="csr") if blocks else sp.csr_matrix((0, 0))
    else:
        Md = Mc.toarray()
        grid = [[sp.csr_matrix(2.0 * Md[ja, jb] * P[np.ix_(ra, rb)]) if Md[ja, jb] else None
                 for rb, jb in zip(lay.rows, lay.cols)] for ra, ja in zip(lay.rows, lay.cols)]
        for k, r in enumerate(lay.rows):
            if grid[k][k] is None:
                grid[k][k] = sp.csr_matrix((r.size, r.size))
        H = sp.bmat(grid, format="csr")
    C = Lc.T @ (sig[:, None] * Lc)
    const = float((Mc.multiply(C)).sum() + ls.c @ (ls.A @ x0))
    return H, g, const


def objective_value(Q, ls: LiftedSystem, M, x0=None) -> float:
    """Expected cost of ``u = Q xi`` computed from the moment matrix (no sampling)."""
    M = np.asarray(M.M if isinstance(M, MomentMatrix) else M, dtype=float)
    x0 = ls.x0 if x0 is None else np.asarray(x0, dtype=float)
    sig = np.diag(ls.Sigma)
    P = ls.L_u.T @ (sig[:, None] * ls.L_u)
    lin = 2.0 * (ls.L_xi.T * sig) @ ls.L_u
    lin[0] += ls.c @ ls.Bb
    X = Q.T @ P @ Q + lin @ Q + ls.L_xi.T @ (sig[:, None] * ls.L_xi)
    return float(np.sum(X * M.T) + ls.c @ (ls.A @ x0))


# ---------------------------------------------------------------------------
# constraint builders.  Each returns (A_in, b_in, A_eq, b_eq, origin) where
# ``origin[k]`` is the constraint row behind inequality k (-1 if none).


class _Triplets:
    def __init__(self):
        self.r, self.c, self.v, self.rhs, self.origin = [], [], [], [], []
        self.n = 0

    def add_block(self, B, col_offset, row_offset=None):
        B = B.tocoo()
        self.r.append(B.row + (self.n if row_offset is None else row_offset))
        self.c.append(B.col + col_offset)
        self.v.append(B.data)

    def add_entries(self, rows, cols, vals):
        self.r.append(np.asarray(rows))
        self.c.append(np.asarray(cols))
        self.v.append(np.broadcast_to(np.asarray(vals, dtype=float), np.shape(rows)))

    def close_rows(self, rhs, origin):
        self.rhs.append(np.asarray(rhs, dtype=float))
        self.origin.append(np.asarray(origin, dtype=int))
        self.n += len(rhs)

    def matrix(self, ncols):
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
        A = sp.csr_matrix((cat(self.v, float), (cat(self.r, int), cat(self.c, int))), shape=(self.n, ncols))
        return A, cat(self.rhs, float), cat(self.origin, int)


def _mirror_map(G, Hc, per):
    """Pairs of row families whose uncertain coefficients are exact negatives."""
    m = G.shape[0]
    canon = np.arange(m)
    Gr, Hr = G.tocsr(), Hc.tocsr()
    for f in range(0, 8, 2):
        hi, lo = slice(f * per, (f + 1) * per), slice((f + 1) * per, (f + 2) * per)
        if abs(Gr[hi] + Gr[lo]).sum() == 0 and abs(Hr[hi][:, 1:] + Hr[lo][:, 1:]).sum() == 0:
            canon[lo] = np.arange(f * per, (f + 1) * per)
    return canon


def _column_data(G, Hc, lay, k):
    j = lay.cols[k]
    Bj = G[:, lay.rows[k]].tocsr()
    hj = np.asarray(Hc[:, j].todense()).ravel()
    return j, Bj, hj, np.diff(Bj.indptr) > 0


def _inner_box(G, Hc, h0, lay, box: BoxSupport, mu, per):
    """Closed-form counterpart ``a_1 + sum_j (c_j a_j + w_j |a_j|) <= 0`` with
    epigraph variables for the ``|a_j|`` that depend on the policy."""
    m = G.shape[0]
    w = 0.5 * (box.upper - box.lower)
    cc = 0.5 * (box.upper + box.lower) - mu
    canon = _mirror_map(G, Hc, per)
    const = h0.copy()
    rob = _Triplets()
    tau = _Triplets()
    tau_r, tau_c, tau_v = [], [], []
    n_tau = 0
    for k in range(len(lay.cols)):
        j, Bj, hj, dep = _column_data(G, Hc, lay, k)
        if j == 0:
            rob.add_block(Bj, lay.offsets[k], row_offset=0)
            continue
        wj, cj = w[j - 1], cc[j - 1]
        if cj:
            rob.add_block(Bj * cj, lay.offsets[k], row_offset=0)
            const += cj * hj
        const[~dep] += wj * np.abs(hj[~dep])
        R = np.flatnonzero(dep & (canon == np.arange(m)))
        if R.size == 0:
            continue
        ids = np.full(m, -1)
        ids[R] = n_tau + np.arange(R.size)
        dep_rows = np.flatnonzero(dep)
        tau_r.append(dep_rows)
        tau_c.append(ids[canon[dep_rows]])
        tau_v.append(np.full(dep_rows.size, wj))
        BR = Bj[R]
        for sgn in (1.0, -1.0):
            tau.add_block(sgn * BR, lay.offsets[k])
            tau.add_entries(tau.n + np.arange(R.size), lay.nq + ids[R], -1.0)
            tau.close_rows(-sgn * hj[R], R)
        n_tau += R.size
    ncols = lay.nq + n_tau
    if tau_r:
        rob.add_entries(np.concatenate(tau_r), lay.nq + np.concatenate(tau_c), np.concatenate(tau_v))
    rob.close_rows(-const, np.arange(m))
    A1, b1, o1 = rob.matrix(ncols)
    A2, b2, o2 = tau.matrix(ncols)
    return sp.vstack([A1, A2], format="csr"), np.concatenate([b1, b2]), np.concatenate([o1, o2]), n_tau


def _inner_general(G, Hc, lay, W, mu, N_xi):
    """Explicit multipliers: ``a_r + nu_r e1 + W_c' pi_r = 0``, ``nu, pi >= 0``."""
    m = G.shape[0]
    ell = W.shape[0]
    Wc = W.copy()
    Wc[:, 0] = W[:, 0] + W[:, 1:] @ mu
    Gr = G.tocsr()
    Hd = Hc.toarray()
    nu0 = lay.nq
    pi0 = nu0 + m
    ncols = pi0 + m * ell
    eq = _Triplets()
    colpos = {j: k for k, j in enumerate(lay.cols)}
    for r in range(m):
        row = Gr[r]
        for j in range(N_xi):
            if j in colpos:
                k = colpos[j]
                seg = row[:, lay.rows[k]].tocoo()
                eq.add_entries(np.full(seg.nnz, eq.n), lay.offsets[k] + seg.col, seg.data)
            if j == 0:
                eq.add_entries([eq.n], [nu0 + r], 1.0)
            nz = np.flatnonzero(Wc[:, j])
            eq.add_entries(np.full(nz.size, eq.n), pi0 + r * ell + nz, Wc[nz, j])
            eq.close_rows([-Hd[r, j]], [r])
    A_eq, b_eq, _ = eq.matrix(ncols)
    n_mult = m * (1 + ell)
    A_in = sp.hstack([sp.csr_matrix((n_mult, lay.nq)), -sp.identity(n_mult)], format="csr")
    origin = np.concatenate([np.arange(m), np.repeat(np.arange(m), ell)])
    return A_in, np.zeros(n_mult), origin, A_eq, b_eq, ncols


def _outer_box(G, Hc, h0, lay, box: BoxSupport, mom: _Moments):
    """Moment constraints for a box and independent coordinates.

    With ``a`` the centered row coefficients: ``a_1 <= 0`` and, per random
    coordinate ``j``, ``(mu_j - l_j) a_1 + var_j a_j <= 0`` and
    ``(u_j - mu_j) a_1 - var_j a_j <= 0``.  Coordinates with zero variance
    only repeat the mean constraint and are skipped.
    """
    m = G.shape[0]
    B0 = G[:, lay.rows[0]].tocsr()
    beta = np.zeros(m)
    tri = _Triplets()
    for k in range(1, len(lay.cols)):
        j, Bj, hj, dep = _column_data(G, Hc, lay, k)
        v = mom.var[j - 1]
        if v <= 0:
            continue
        dl = mom.mu[j - 1] - box.lower[j - 1]
        du = box.upper[j - 1] - mom.mu[j - 1]
        nd = ~dep
        beta[nd] = np.minimum(beta[nd], np.minimum(-v * hj[nd] / dl, v * hj[nd] / du))
        R = np.flatnonzero(dep)
        if R.size == 0:
            continue
        B0R, BjR = B0[R], Bj[R]
        tri.add_block(dl * B0R, 0)
        tri.add_block(v * BjR, lay.offsets[k])
        tri.close_rows(-dl * h0[R] - v * hj[R], R)
        tri.add_block(du * B0R, 0)
        tri.add_block(-v * BjR, lay.offsets[k])
        tri.close_rows(-du * h0[R] + v * hj[R], R)
    tri.add_block(B0, 0)
    tri.close_rows(beta - h0, np.arange(m))
    return tri.matrix(lay.nq)


def _outer_general(G, Hc, lay, W, mom: _Moments, N_xi):
    """``W_c M_c a_r <= 0`` and ``a_r1 <= 0`` for every row, densely."""
    m = G.shape[0]
    Wc = W.copy()
    Wc[:, 0] = W[:, 0] + W[:, 1:] @ mom.mu
    WM = np.vstack([Wc @ mom.centered().toarray(), np.eye(1, N_xi)])
    Gr = G.tocsr()
    Hd = Hc.toarray()
    tri = _Triplets()
    for r in range(m):
        row = Gr[r]
        for k, j in enumerate(lay.cols):
            seg = row[:, lay.rows[k]].tocoo()
            if seg.nnz == 0:
                continue
            nzw = np.flatnonzero(WM[:, j])
            rr = np.repeat(tri.n + nzw, seg.nnz)
            cc = np.tile(lay.offsets[k] + seg.col, nzw.size)
            vv = np.outer(WM[nzw, j], seg.data).ravel()
            tri.add_entries(rr, cc, vv)
        tri.close_rows(-WM @ Hd[r], np.full(WM.shape[0], r))
    return tri.matrix(lay.nq)


# ---------------------------------------------------------------------------
# driver


def _check_constant_rows(A, b, origin, ls, tol):
    """Drop rows without variables; rows that fail as data mean infeasibility."""
    empty = np.diff(A.indptr) == 0
    bad = empty & (b < -tol * (1.0 + np.abs(b)))
    if np.any(bad):
        rows = _describe(ls, origin[bad])
        fam, bus, t = rows[0]
        raise InfeasibleProgramError(
            f"robust program infeasible: {FAMILY_KIND[fam[0]]} row {fam} at bus {bus}, t={t} "
            "is violated whatever the policy", rows)
    keep = ~empty
    return A[keep], b[keep], origin[keep]


def _describe(ls, origins):
    seen, out = set(), []
    for r in origins:
        if r < 0 or r in seen:
            continue
        seen.add(r)
        out.append(ls.row_info(r))
    return out


def _prune(H, g, A_in, A_eq):
    """Variables that appear nowhere are fixed at zero."""
    used = (np.diff(H.tocsc().indptr) > 0) | (g != 0)
    for A in (A_in, A_eq):
        if A is not None and A.shape[0]:
            used |= np.diff(A.tocsc().indptr) > 0
    return np.flatnonzero(used)


def _solve(H, g, A_in, b_in, A_eq, b_eq, origin, ls, settings, sparse):
    keep = _prune(H, g, A_in, A_eq)
    H = H.tocsr()[keep][:, keep]
    A_in = A_in.tocsc()[:, keep].tocsr()
    if A_eq is not None:
        A_eq = A_eq.tocsc()[:, keep].tocsr()
    # row scaling; feasibility is unchanged
    scale = abs(A_in).max(axis=1).toarray().ravel() if A_in.shape[0] else np.ones(0)
    scale[scale == 0] = 1.0
    A_in = sp.diags(1.0 / scale) @ A_in
    b_in = b_in / scale
    d = keep.size
    use_sparse = sparse if sparse is not None else d + A_in.shape[0] > SPARSE_THRESHOLD
    conv = (lambda X: X) if use_sparse else (lambda X: X.toarray())
    prob = QPProblem(conv(H), g[keep], None if A_eq is None else conv(A_eq), b_eq, conv(A_in), b_in)
    t0 = time.perf_counter()
    sol = solve_qp(prob, settings)
    report = SolverReport(sol.status, sol.iterations, sol.primal_res, sol.ineq_res, sol.dual_res,
                          sol.comp_res, d, prob.A_eq.shape[0], prob.A_in.shape[0],
                          time.perf_counter() - t0, sol.message)
    logger.info("QP: %d vars, %d ineq, %s in %d iterations (%.2fs)", d, prob.A_in.shape[0],
                sol.status, sol.iterations, report.seconds)
    if sol.status == INFEASIBLE:
        order = np.argsort(-sol.lam * scale, kind="stable")
        rows = _describe(ls, origin[order[:50]])[:5]
        fam, bus, t = rows[0] if rows else ("?", 0, 0)
        raise InfeasibleProgramError(
            f"robust program infeasible (solver: {sol.message}); first suspect: "
            f"{FAMILY_KIND.get(fam[0], fam)} row {fam} at bus {bus}, t={t}", rows, report)
    if sol.status != OPTIMAL:
        raise SynthesisError(
            f"QP solver stopped with status {sol.status}: primal {sol.primal_res:.2e}, "
            f"inequality {sol.ineq_res:.2e}, dual {sol.dual_res:.2e}, complementarity {sol.comp_res:.2e}",
            report)
    full = np.zeros(g.size)
    full[keep] = sol.z
    return full, sol.objective, report


def _setup(ls, dm, M, x0, variant):
    if dm.N_xi != ls.N_xi:
        raise ValueError("disturbance model does not match the lifted system")
    x0 = ls.x0 if x0 is None else np.asarray(x0, dtype=float)
    mom = _moments(dm, M)
    lay = _Layout(ls, _kept_columns(dm))
    G, H0 = ls.composed(variant, x0)
    Gc, Hc, h0 = _centered_rows(G, H0, mom.mu)
    return x0, mom, lay, Gc, Hc, h0


def synthesize_policy(ls: LiftedSystem, dm: DisturbanceModel, M=None, x0=None,
                      settings: QPSettings | None = None, sparse=None) -> AffinePolicy:
    """Decentralized affine policy minimizing expected cost subject to the inner
    constraints holding for every disturbance in the support.

    ``M`` defaults to the moment matrix of ``dm``.  Raises
    :class:`InfeasibleProgramError` or :class:`SynthesisError`.
    """
    st = settings or QPSettings()
    x0, mom, lay, Gc, Hc, h0 = _setup(ls, dm, M, x0, "inner")
    H, g, const = _objective(ls, lay, mom, x0)
    A_eq = b_eq = None
    if isinstance(dm.support, BoxSupport):
        A_in, b_in, origin, n_aux = _inner_box(Gc, Hc, h0, lay, dm.support, mom.mu, ls.n * ls.T)
        A_in, b_in, origin = _check_constant_rows(A_in, b_in, origin, ls, st.feastol)
    else:
        W = dm.support.W
        _check_rows_general(Gc, Hc, lay, ls, dm, mom.mu, st.feastol)
        A_in, b_in, origin, A_eq, b_eq, ncols = _inner_general(Gc, Hc, lay, W, mom.mu, ls.N_xi)
        n_aux = ncols - lay.nq
    H = sp.block_diag([H, sp.csr_matrix((n_aux, n_aux))], format="csr")
    g = np.concatenate([g, np.zeros(n_aux)])
    z, val, report = _solve(H, g, A_in, b_in, A_eq, b_eq, origin, ls, st, sparse)
    Q = _uncenter(lay.scatter(z[:lay.nq]), mom.mu)
    return AffinePolicy(Q, val + const, report, ls.n, ls.T, ls.delta)


def _check_rows_general(Gc, Hc, lay, ls, dm, mu, tol):
    """Rows untouched by the policy must hold over the whole support."""
    Gr = Gc.tocsr()
    free = np.zeros(ls.N_u, bool)
    for r in lay.rows:
        free[r] = True
    bad = []
    H = Hc.toarray()
    for r in np.flatnonzero(np.diff(Gr[:, free].indptr) == 0):
        a = H[r].copy()
        a[0] = a[0] - a[1:] @ mu  # back to raw coordinates
        if worst_case(a, dm.support).sup > tol * (1.0 + abs(a[0])):
            bad.append(r)
    if bad:
        rows = _describe(ls, bad)
        fam, bus, t = rows[0]
        raise InfeasibleProgramError(
            f"robust program infeasible: {FAMILY_KIND[fam[0]]} row {fam} at bus {bus}, t={t} "
            "is violated whatever the policy", rows)


def compute_lower_bound(ls: LiftedSystem, dm: DisturbanceModel, M=None, x0=None,
                        settings: QPSettings | None = None, sparse=None) -> LowerBoundResult:
    """Moment relaxation over the outer constraints.

    Its value bounds the optimal expected cost from below when the
    disturbance model is certified by :func:`check_assumption1`.
    """
    st = settings or QPSettings()
    x0, mom, lay, Gc, Hc, h0 = _setup(ls, dm, M, x0, "outer")
    H, g, const = _objective(ls, lay, mom, x0)
    if isinstance(dm.support, BoxSupport) and mom.diagonal:
        A_in, b_in, origin = _outer_box(Gc, Hc, h0, lay, dm.support, mom)
    else:
        W = support_matrix(dm)
        A_in, b_in, origin = _outer_general(Gc, Hc, lay, W, mom, ls.N_xi)
    A_in, b_in, origin = _check_constant_rows(A_in, b_in, origin, ls, st.feastol)
    z, val, report = _solve(H, g, A_in, b_in, None, None, origin, ls, st, sparse)
    Q = _uncenter(lay.scatter(z), mom.mu)
    G, H0 = ls.composed("outer", x0)
    Z = -(G @ Q + H0.toarray())
    return LowerBoundResult(val + const, Q, Z, report, check_assumption1(dm))


# ---------------------------------------------------------------------------
# per-row dualization and certificates


def worst_case(a, support) -> RowDual:
    """``sup a' xi`` over ``{xi : xi_1 = 1, xi_(2:) in support}`` with its multipliers.

    ``support`` is a :class:`BoxSupport`, a :class:`PolytopeSupport`, or a
    matrix ``W`` describing ``{W xi >= 0}``.  Boxes use the closed form
    (center value plus halfwidth-weighted absolute coefficients); polytopes
    solve the dual LP.
    """
    a = np.asarray(a, dtype=float)
    if isinstance(support, BoxSupport):
        aj = a[1:]
        pi = np.empty(2 * aj.size)
        pi[0::2] = np.maximum(-aj, 0.0)
        pi[1::2] = np.maximum(aj, 0.0)
        center = support.center
        sup = a[0] + aj @ center + np.abs(aj) @ support.halfwidth
        return RowDual(float(sup), float(-sup), pi)
    W = support.W if isinstance(support, PolytopeSupport) else np.asarray(support, dtype=float)
    ell = W.shape[0]
    # min y  s.t.  y e1 - W' pi = a,  pi >= 0
    A_eq = np.hstack([np.eye(W.shape[1], 1), -W.T])
    res = linprog(np.eye(1, ell + 1).ravel(), A_eq=A_eq, b_eq=a,
                  bounds=[(None, None)] + [(0, None)] * ell, method="highs")
    if res.status == 2:
        raise ValueError("support is unbounded along this row (or empty); it must be a compact polytope")
    if res.status != 0:
        raise RuntimeError(f"LP for the row worst case failed: {res.message}")
    y = float(res.x[0])
    return RowDual(y, -y, res.x[1:])


def dualize_row(row, Q, support, x0, ls: LiftedSystem) -> RowDual:
    """Worst case of one constraint row ``(a_u, a_x, a_xi)`` under ``u = Q xi``."""
    a_u, a_x, a_xi = (np.asarray(v, dtype=float) for v in row)
    a = (a_u + a_x @ ls.Bb) @ Q + a_xi
    a[0] += a_x @ (ls.A @ np.asarray(x0, dtype=float))
    return worst_case(a, support)


def robust_counterpart(Q, ls: LiftedSystem, dm: DisturbanceModel, variant="inner", x0=None) -> RobustCounterpart:
    """Certificates ``(nu, Pi)`` for every row at policy ``Q``."""
    G, H0 = ls.composed(variant, x0)
    A = G @ Q + H0.toarray()
    if isinstance(dm.support, BoxSupport):
        W = box_to_polytope(dm.support)
        box = dm.support
        Aj = A[:, 1:]
        m, N = Aj.shape
        Pi = np.empty((m, 2 * N))
        Pi[:, 0::2] = np.maximum(-Aj, 0.0)
        Pi[:, 1::2] = np.maximum(Aj, 0.0)
        nu = -(A[:, 0] + Aj @ box.center + np.abs(Aj) @ box.halfwidth)
        Pi = sp.csr_matrix(Pi)
    else:
        W = dm.support.W
        duals = [worst_case(a, W) for a in A]
        nu = np.array([d.nu for d in duals])
        Pi = sp.csr_matrix(np.array([d.pi for d in duals]))
    resid = A + np.outer(nu, np.eye(1, A.shape[1]).ravel()) + Pi @ W
    return RobustCounterpart(nu, Pi, W, float(np.abs(resid).max()))


# ---------------------------------------------------------------------------
# policy files

_MAGIC = "dercontrol-policy 1"


def write_policy(policy: AffinePolicy, path):
    """Write the free entries of ``Q`` (see README for the format)."""
    mask = build_policy_mask(policy.n, policy.T)
    if np.any(policy.Q[~mask]):
        raise ValueError("policy has nonzero entries outside the decentralized mask")
    vals = policy.Q[mask]  # row-major order
    with open(path, "w") as f:
        f.write(_MAGIC + "\n")
        f.write(f"n {policy.n}\nT {policy.T}\ndelta_h {policy.delta!r}\nn_xi {policy.Q.shape[1]}\n")
        f.write("xi_order 1,(t,bus,p|q|I)\nu_order (t,bus,pS|qI)\n")
        f.write(f"J_in {float(policy.J_in)!r}\nn_free {vals.size}\n")
        f.writelines(repr(float(v)) + "\n" for v in vals)


def read_policy(path) -> AffinePolicy:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a policy file")
    head = dict(line.split(" ", 1) for line in lines[1:9])
    n, T = int(head["n"]), int(head["T"])
    mask = build_policy_mask(n, T)
    n_free = int(head["n_free"])
    if n_free != mask.sum() or int(head["n_xi"]) != mask.shape[1]:
        raise ValueError(f"{path}: header does not match an n={n}, T={T} policy")
    vals = np.array([float(v) for v in lines[9:9 + n_free]])
    if vals.size != n_free:
        raise ValueError(f"{path}: expected {n_free} values, found {vals.size}")
    Q = np.zeros(mask.shape)
    Q[mask] = vals
    return AffinePolicy(Q, float(head["J_in"]), None, n, T, float(head["delta_h"]))
