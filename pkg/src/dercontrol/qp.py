"""Primal-dual interior-point solver for convex quadratic programs.

Solves::

    minimize    1/2 z' H z + g' z
    subject to  A_eq z  = b_eq
                A_in z <= b_in

with Mehrotra's predictor-corrector method.  Each Newton step eliminates the
inequality slacks and multipliers and factors the reduced KKT matrix::

    [ H + A_in' D A_in + rho I    A_eq' ]
    [ A_eq                     -delta I ]

once per iteration (dense LU, or sparse LU when the data are scipy.sparse),
followed by iterative refinement against the unregularized system.  Primal
and dual variables share one step length, so the scaled residual norm (the
logged merit) shrinks by ``1 - alpha`` every iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


class NonConvexError(ValueError):
    """The Hessian has a direction of negative curvature."""

    def __init__(self, message, direction, curvature):
        super().__init__(message)
        self.direction = direction
        self.curvature = curvature


@dataclass
class QPSettings:
    feastol: float = 1e-8
    opttol: float = 1e-8
    max_iter: int = 100
    reg_dual: float = 1e-9      # (2,2) block
    reg_primal: float = 1e-11   # (1,1) block, removed again by refinement
    refine_steps: int = 3
    step_fraction: float = 0.99
    psd_tol: float = 1e-9
    stall_window: int = 10
    check_convexity: bool = True
    polish_steps: int = 5


@dataclass
class QPProblem:
    H: object
    g: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_in: object = None
    b_in: np.ndarray = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        d = self.g.size
        self.H = _as_matrix(self.H)
        if self.H.shape != (d, d):
            raise ValueError(f"H must be {d}x{d}, got {self.H.shape}")
        asym = abs(self.H - self.H.T).max() if d else 0.0
        scale = max(1.0, abs(self.H).max()) if d else 1.0
        if asym > 1e-12 * scale:
            raise ValueError(f"H is not symmetric (max asymmetry {asym:.3g})")
        for a_name, b_name in (("A_eq", "b_eq"), ("A_in", "b_in")):
            A, b = getattr(self, a_name), getattr(self, b_name)
            if A is None:
                A = np.zeros((0, d))
                b = np.zeros(0)
            A = _as_matrix(A)
            b = np.asarray(b, dtype=float).ravel()
            if A.shape[1] != d or A.shape[0] != b.size:
                raise ValueError(f"{a_name} / {b_name} have inconsistent shapes {A.shape}, {b.shape}")
            setattr(self, a_name, A)
            setattr(self, b_name, b)

    @property
    def dim(self):
        return self.g.size

    @property
    def is_sparse(self):
        return sp.issparse(self.H) or sp.issparse(self.A_in) or sp.issparse(self.A_eq)

    def objective(self, z):
        return float(0.5 * z @ (self.H @ z) + self.g @ z)


@dataclass
class QPSolution:
    z: np.ndarray
    y: np.ndarray            # equality multipliers
    lam: np.ndarray          # inequality multipliers (>= 0)
    s: np.ndarray            # inequality slacks (>= 0)
    status: str
    iterations: int
    objective: float
    primal_res: float        # ||A_eq z - b_eq||_inf
    ineq_res: float          # max(A_in z - b_in, 0)
    dual_res: float          # ||H z + g + A_eq' y + A_in' lam||_inf
    comp_res: float          # max |s_i lam_i|
    merit_history: list = field(default_factory=list)
    message: str = ""
    certificate: np.ndarray | None = None

    @property
    def ok(self):
        return self.status == OPTIMAL


def _as_matrix(A):
    if sp.issparse(A):
        return sp.csr_matrix(A, dtype=float)
    return np.atleast_2d(np.asarray(A, dtype=float))


def _inf(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def check_convexity(H, tol=1e-9):
    """Raise :class:`NonConvexError` if ``H`` has curvature below ``-tol * scale``.

    Sparse Hessians are split into connected blocks and each block is checked
    densely.
    """
    d = H.shape[0]
    if d == 0:
        return
    if sp.issparse(H):
        ncomp, labels = connected_components(abs(H) > 0, directed=False)
        blocks = [np.flatnonzero(labels == k) for k in range(ncomp)]
        Hc = H.tocsr()
    else:
        blocks = [np.arange(d)]
        Hc = H
    scale = max(1.0, _inf(H.data) if sp.issparse(H) else _inf(H))
    for idx in blocks:
        sub = Hc[idx][:, idx]
        sub = sub.toarray() if sp.issparse(sub) else sub
        if idx.size == 1:
            w, V = np.array([sub[0, 0]]), np.ones((1, 1))
        else:
            w, V = np.linalg.eigh(0.5 * (sub + sub.T))
        if w[0] < -tol * scale:
            direction = np.zeros(d)
            direction[idx] = V[:, 0]
            raise NonConvexError(f"Hessian has negative curvature {w[0]:.3g}", direction, float(w[0]))


def _equality_certificate(A, b, tol):
    """Least-squares test of ``A z = b``; returns a Farkas-like vector if inconsistent."""
    if A.shape[0] == 0:
        return None
    if sp.issparse(A):
        z = spla.lsqr(A, b, atol=1e-14, btol=1e-14, iter_lim=10 * max(A.shape))[0]
    else:
        z = np.linalg.lstsq(A, b, rcond=None)[0]
    r = b - A @ z
    if _inf(r) > tol * (1.0 + _inf(b)):
        return r / np.linalg.norm(r)
    return None


class _KKT:
    """Factorization of the regularized reduced KKT matrix for one iteration."""

    def __init__(self, prob: QPProblem, D, settings: QPSettings):
        self.prob = prob
        self.D = D
        d, ne = prob.dim, prob.A_eq.shape[0]
        self.d, self.ne = d, ne
        G, A, H = prob.A_in, prob.A_eq, prob.H
        rho, delta = settings.reg_primal, settings.reg_dual
        if prob.is_sparse:
            Gs = sp.csr_matrix(G)
            K11 = sp.csr_matrix(H) + Gs.T @ sp.diags(D) @ Gs + rho * sp.eye(d)
            K = sp.bmat([[K11, sp.csr_matrix(A).T], [sp.csr_matrix(A), -delta * sp.eye(ne)]], format="csc")
            self._lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options={"SymmetricMode": True})
            self._solve = self._lu.solve
        else:
            K11 = H + (G.T * D) @ G + rho * np.eye(d)
            K = np.block([[K11, A.T], [A, -delta * np.eye(ne)]]) if ne else K11
            lu = sla.lu_factor(K, check_finite=False)
            self._solve = lambda rhs: sla.lu_solve(lu, rhs, check_finite=False)
        self.refine = settings.refine_steps

    def _apply(self, v):
        """Unregularized reduced KKT operator."""
        p = self.prob
        z, y = v[:self.d], v[self.d:]
        top = p.H @ z + p.A_in.T @ (self.D * (p.A_in @ z)) + p.A_eq.T @ y
        return np.concatenate([top, p.A_eq @ z])

    def solve(self, rhs):
        x = self._solve(rhs)
        for _ in range(self.refine):
            r = rhs - self._apply(x)
            if _inf(r) <= 1e-15 * (1.0 + _inf(rhs)):
                break
            x = x + self._solve(r)
        return x


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve_qp(p: QPProblem, settings: QPSettings | None = None) -> QPSolution:
    """Solve a convex QP; see the module docstring for the method."""
    st = settings or QPSettings()
    if st.check_convexity:
        check_convexity(p.H, st.psd_tol)
    d, ne, ni = p.dim, p.A_eq.shape[0], p.A_in.shape[0]
    H, g, A, b, G, h = p.H, p.g, p.A_eq, p.b_eq, p.A_in, p.b_in
    sc_b = 1.0 + _inf(b)
    sc_h = 1.0 + _inf(h)
    sc_g = 1.0 + _inf(g)

    cert = _equality_certificate(A, b, st.feastol)
    if cert is not None:
        z = np.zeros(d)
        return _finish(p, z, np.zeros(ne), np.zeros(ni), np.maximum(h, 0), INFEASIBLE, 0, [],
                       "equality constraints are inconsistent", cert)

    # shifted least-squares start: min 1/2 z'Hz + g'z + 1/2 ||Gz - h||^2 s.t. Az = b
    kkt = _KKT(p, np.ones(ni), st)
    sol = kkt.solve(np.concatenate([-g + G.T @ h, b]))
    z, y = sol[:d], sol[d:]
    s = np.maximum(h - G @ z, 1.0)
    lam = np.ones(ni)

    history = []
    status, message = MAX_ITER, "iteration limit reached"
    it = 0
    mu_hist = []
    polish = 0
    for it in range(st.max_iter + 1):
        r_d = H @ z + g + A.T @ y + G.T @ lam
        r_p = A @ z - b
        r_i = G @ z + s - h
        mu = float(s @ lam) / ni if ni else 0.0
        merit = max(_inf(r_d) / sc_g, _inf(r_p) / sc_b, _inf(r_i) / sc_h)
        history.append(merit)
        mu_hist.append(mu)
        obj = p.objective(z)
        comp = _inf(s * lam)
        # the scaled test decides convergence; a few extra polishing steps
        # then try to meet the absolute tolerances as well, with the total
        # gap s'lam (which bounds the objective error) in place of max s_i lam_i
        ineq_viol = float(max(0.0, (G @ z - h).max())) if ni else 0.0
        if (_inf(r_p) <= st.feastol and ineq_viol <= st.feastol
                and _inf(r_d) <= st.opttol and mu * ni <= st.opttol):
            status, message = OPTIMAL, "converged"
            break
        if (_inf(r_p) <= st.feastol * sc_b and _inf(r_i) <= st.feastol * sc_h
                and _inf(r_d) <= st.opttol * sc_g and comp <= st.opttol * (1.0 + abs(obj))):
            polish += 1
            if polish > st.polish_steps:
                status, message = OPTIMAL, "converged (relative tolerances)"
                break
        if it == st.max_iter:
            break
        if _looks_infeasible(history, mu_hist, lam, st):
            status, message = INFEASIBLE, "no certificate: residuals stalled while the duality measure diverged"
            break
        if ni == 0:
            kkt = _KKT(p, np.zeros(0), st)
            step = kkt.solve(np.concatenate([-r_d, -r_p]))
            z, y = z + step[:d], y + step[d:]
            continue

        D = lam / s
        kkt = _KKT(p, D, st)

        def newton(r_c):
            rhs = np.concatenate([-r_d - G.T @ (D * r_i - r_c / s), -r_p])
            sol = kkt.solve(rhs)
            dz, dy = sol[:d], sol[d:]
            dlam = D * (G @ dz + r_i) - r_c / s
            ds = -(r_c + s * dlam) / lam
            return dz, dy, dlam, ds

        dz, dy, dlam, ds = newton(s * lam)
        alpha = min(_max_step(s, ds), _max_step(lam, dlam))
        mu_aff = float((s + alpha * ds) @ (lam + alpha * dlam)) / ni
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dz, dy, dlam, ds = newton(s * lam + ds * dlam - sigma * mu)
        alpha = min(1.0, st.step_fraction * min(_max_step(s, ds), _max_step(lam, dlam)))
        z, y, lam, s = z + alpha * dz, y + alpha * dy, lam + alpha * dlam, s + alpha * ds
        logger.debug("iter %d merit %.3e mu %.3e alpha %.3f", it, merit, mu, alpha)

    return _finish(p, z, y, lam, s, status, it, history, message, None)


def _looks_infeasible(history, mu_hist, lam, st: QPSettings):
    w = st.stall_window
    if len(history) <= w:
        return False
    stalled = history[-1] > 0.5 * history[-1 - w] and history[-1] > st.feastol
    diverging = mu_hist[-1] > 10.0 * mu_hist[-1 - w] or _inf(lam) > 1e12
    return stalled and diverging


def _finish(p, z, y, lam, s, status, it, history, message, cert):
    r_d = p.H @ z + p.g + p.A_eq.T @ y + p.A_in.T @ lam
    viol = p.A_in @ z - p.b_in
    return QPSolution(
        z=z, y=y, lam=lam, s=s, status=status, iterations=it, objective=p.objective(z),
        primal_res=_inf(p.A_eq @ z - p.b_eq), ineq_res=float(max(0.0, viol.max())) if viol.size else 0.0,
        dual_res=_inf(r_d), comp_res=_inf(s * lam), merit_history=history, message=message,
        certificate=cert)


# ---------------------------------------------------------------------------
# text dump for external cross-checking


def dump_qp(p: QPProblem, path):
    """Write ``p`` as text.

    The first line is ``d n_eq n_in``.  Then come the sections H, g, A_eq,
    b_eq, A_in, b_in, each introduced by its name on its own line.  Matrices
    are written densely with one row per line.  Vectors take exactly one line,
    which may be empty.  Values use ``repr`` and so round-trip exactly.
    """
    def dense(M):
        return M.toarray() if sp.issparse(M) else np.asarray(M)

    def fmt(row):
        return " ".join(repr(float(v)) for v in row) + "\n"

    with open(path, "w") as f:
        f.write(f"{p.dim} {p.A_eq.shape[0]} {p.A_in.shape[0]}\n")
        for name, M in (("H", p.H), ("g", p.g), ("A_eq", p.A_eq), ("b_eq", p.b_eq),
                        ("A_in", p.A_in), ("b_in", p.b_in)):
            f.write(name + "\n")
            M = dense(M)
            if M.ndim == 1:
                f.write(fmt(M))
            else:
                f.writelines(fmt(row) for row in M)


def load_qp(path) -> QPProblem:
    """Inverse of :func:`dump_qp`."""
    with open(path) as f:
        lines = f.read().split("\n")
    d, ne, ni = map(int, lines[0].split())
    pos = 1

    def section(name, rows, cols, vector=False):
        nonlocal pos
        if lines[pos].strip() != name:
            raise ValueError(f"expected section {name!r} at line {pos + 1}")
        pos += 1
        count = 1 if vector else rows
        data = [[float(v) for v in lines[pos + k].split()] for k in range(count)]
        pos += count
        out = np.array(data, dtype=float).reshape(-1 if vector else rows, cols if not vector else 1)
        return out.ravel() if vector else out.reshape(rows, cols)

    H = section("H", d, d)
    g = section("g", 1, d, vector=True)
    A_eq = section("A_eq", ne, d)
    b_eq = section("b_eq", 1, ne, vector=True)
    A_in = section("A_in", ni, d)
    b_in = section("b_in", 1, ni, vector=True)
    return QPProblem(H, g, A_eq, b_eq, A_in, b_in)
