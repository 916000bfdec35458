"""Trajectory-space matrices for the decentralized control problem.

Index conventions (all 0-based):

* state    ``x = (x(0), ..., x(T))``,      entry ``n*t + i``
* input    ``u = (u(0), ..., u(T-1))``,    entry ``2*n*t + 2*i + c`` with
  ``c = 0`` storage discharge ``pS`` (MW) and ``c = 1`` reactive injection ``qI`` (Mvar)
* disturbance ``xi``: see :mod:`dercontrol.scenario`.

Constraint rows (``m = 8 n T``) come in eight families of ``n T`` rows, each
ordered period-major (row ``n*t + i`` within the family)::

    v_hi, v_lo, x_hi, x_lo, p_hi, p_lo, q_hi, q_lo

State rows refer to ``x(t+1)``; ``x(0)`` is fixed and checked up front.
Every row reads ``F_x x + F_u u + F_xi xi <= 0`` with the right-hand side
folded into the constant column of ``F_xi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .network import RadialNetwork, SensitivityMatrices, build_rx
from .scenario import (PV, BoxSupport, DisturbanceModel, PolytopeSupport, ResourceSet,
                       Scenario, ScenarioError)

FAMILIES = ("v_hi", "v_lo", "x_hi", "x_lo", "p_hi", "p_lo", "q_hi", "q_lo")
FAMILY_KIND = {"v": "voltage", "x": "state", "p": "storage input", "q": "inverter input"}


@dataclass(frozen=True)
class ConstraintTriple:
    Fx: sp.csr_matrix
    Fu: sp.csr_matrix
    Fxi: sp.csr_matrix


@dataclass(frozen=True)
class LiftedSystem:
    n: int
    T: int
    delta: float
    x0: np.ndarray
    A: np.ndarray            # N_x x n
    Bb: np.ndarray           # N_x x N_u (block lower triangular)
    B: np.ndarray            # n x 2n
    c: np.ndarray            # N_x
    L_u: np.ndarray
    L_xi: np.ndarray
    Sigma: np.ndarray
    V_u: np.ndarray
    V_xi: np.ndarray
    F_in: ConstraintTriple
    F_out: ConstraintTriple
    q_bar: np.ndarray        # n x T, Mvar
    S_mask: np.ndarray       # N_u x N_xi bool
    input_active: np.ndarray  # N_u bool: channel not pinned to zero
    v0: float
    v_lo: np.ndarray
    v_hi: np.ndarray
    b: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    s: np.ndarray

    @property
    def N_x(self):
        return self.n * (self.T + 1)

    @property
    def N_u(self):
        return 2 * self.n * self.T

    @property
    def N_xi(self):
        return 1 + 3 * self.n * self.T

    @property
    def m(self):
        return 8 * self.n * self.T

    def row_info(self, r):
        """``(family, bus label, t)`` of constraint row ``r``."""
        per = self.n * self.T
        fam, k = divmod(int(r), per)
        t, i = divmod(k, self.n)
        return FAMILIES[fam], i + 1, t

    def composed(self, variant="inner", x0=None):
        """``(G, H0)`` with row values ``G Q + H0`` for ``u = Q xi``.

        ``G = F_u + F_x Bb`` (sparse, m x N_u) and
        ``H0 = F_x A x0 e1' + F_xi`` (sparse, m x N_xi).
        """
        F = self.F_in if variant == "inner" else self.F_out
        x0 = self.x0 if x0 is None else np.asarray(x0, dtype=float)
        G = (F.Fu + F.Fx @ sp.csr_matrix(self.Bb)).tocsr()
        const = F.Fx @ (self.A @ x0)
        rows = np.flatnonzero(const)
        shift = sp.csr_matrix((const[rows], (rows, np.zeros_like(rows))), shape=F.Fxi.shape)
        return G, (F.Fxi + shift).tocsr()


def build_step_input_map(n, delta) -> np.ndarray:
    """``B = I_n kron [-delta, 0]``: storage state responds to ``pS`` only."""
    if n < 1 or delta <= 0:
        raise ValueError("need n >= 1 and delta > 0")
    return np.kron(np.eye(n), np.array([[-delta, 0.0]]))


def build_lifting(n, T, B):
    """``(A, Bb, c)`` with ``x = A x(0) + Bb u`` and ``c' x = sum_i x_i(T)``."""
    A = np.kron(np.ones((T + 1, 1)), np.eye(n))
    Bb = np.zeros((n * (T + 1), 2 * n * T))
    for t in range(1, T + 1):
        for s in range(t):
            Bb[n * t:n * (t + 1), 2 * n * s:2 * n * (s + 1)] = B
    c = np.concatenate([np.zeros(n * T), np.ones(n)])
    return A, Bb, c


def build_loss_maps(net: RadialNetwork, sm: SensitivityMatrices, n, T):
    """Line flows and loss weights.

    Per period, row ``2j`` of ``L_u0 u(t) + L_xi0 xi(t)`` is the active flow
    into bus ``j`` and row ``2j+1`` the reactive flow (lossless DistFlow);
    ``Sigma0 = diag(r_j / v0^2)`` repeated for both rows.
    """
    L_u0 = np.zeros((2 * n, 2 * n))
    L_xi0 = np.zeros((2 * n, 3 * n))
    for j in range(n):
        for k in sm.subtree[j]:
            L_u0[2 * j, 2 * k] = -1.0
            L_u0[2 * j + 1, 2 * k + 1] = -1.0
            L_xi0[2 * j, 3 * k] = 1.0
            L_xi0[2 * j, 3 * k + 2] = -1.0
            L_xi0[2 * j + 1, 3 * k + 1] = 1.0
    sigma0 = np.repeat(net.r_line / net.v0**2, 2)
    L_u = np.kron(np.eye(T), L_u0)
    L_xi = np.hstack([np.zeros((2 * n * T, 1)), np.kron(np.eye(T), L_xi0)])
    Sigma = np.diag(np.tile(sigma0, T))
    return L_u, L_xi, Sigma


def build_voltage_maps(sm: SensitivityMatrices):
    """Per-period maps with ``v(t)^2 = V_u u(t) + V_xi xi(t) + v0^2``."""
    V_u = np.kron(sm.R, [[1.0, 0.0]]) + np.kron(sm.X, [[0.0, 1.0]])
    V_xi = np.kron(sm.R, [[-1.0, 0.0, 1.0]]) - np.kron(sm.X, [[0.0, 1.0, 0.0]])
    return V_u, V_xi


def reactive_headroom(dm: DisturbanceModel, s) -> np.ndarray:
    """Guaranteed reactive capability ``inf over the support of sqrt(s^2 - xi_I^2)``.

    The infimum sits where ``|xi_I|`` is largest, so only the extreme PV
    values of the support matter.
    """
    s = np.asarray(s, dtype=float)
    n, T = dm.n, dm.T
    box = dm.box()
    idx = np.array([[dm.index(t, i, PV) - 1 for t in range(T)] for i in range(n)])
    peak = np.maximum(np.abs(box.lower[idx]), np.abs(box.upper[idx]))
    over = peak > s[:, None] * (1 + 1e-12) + 1e-12
    if np.any(over):
        i, t = np.argwhere(over)[0]
        raise ScenarioError(
            f"PV supply at bus {i + 1}, t={t} can reach {peak[i, t]:.6g} MW, above inverter capacity {s[i]:.6g} MVA")
    return np.sqrt(np.maximum(s[:, None] ** 2 - peak**2, 0.0))


def build_constraint_triples(n, T, V_u, V_xi, q_bar, res: ResourceSet, v_lo, v_hi, v0, variant="inner"):
    """Inner (constant reactive bound) or outer (``|qI| <= sqrt2 s - xi_I``) rows."""
    if variant not in ("inner", "outer"):
        raise ValueError("variant must be 'inner' or 'outer'")
    per = n * T
    m = 8 * per
    N_x, N_u, N_xi = n * (T + 1), 2 * n * T, 1 + 3 * n * T
    Fx = sp.lil_matrix((m, N_x))
    Fu = sp.lil_matrix((m, N_u))
    Fxi = sp.lil_matrix((m, N_xi))
    v_lo2, v_hi2 = np.asarray(v_lo) ** 2, np.asarray(v_hi) ** 2
    for t in range(T):
        ucols = slice(2 * n * t, 2 * n * (t + 1))
        xcols = slice(1 + 3 * n * t, 1 + 3 * n * (t + 1))
        for i in range(n):
            k = n * t + i
            r = 0 * per + k  # v_hi
            Fu[r, ucols] = V_u[i]
            Fxi[r, xcols] = V_xi[i]
            Fxi[r, 0] = v0**2 - v_hi2[i]
            r = 1 * per + k  # v_lo
            Fu[r, ucols] = -V_u[i]
            Fxi[r, xcols] = -V_xi[i]
            Fxi[r, 0] = v_lo2[i] - v0**2
            r = 2 * per + k  # x_hi on x(t+1)
            Fx[r, n * (t + 1) + i] = 1.0
            Fxi[r, 0] = -res.b[i]
            r = 3 * per + k
            Fx[r, n * (t + 1) + i] = -1.0
            pu = 2 * n * t + 2 * i
            r = 4 * per + k
            Fu[r, pu] = 1.0
            Fxi[r, 0] = -res.p_hi[i]
            r = 5 * per + k
            Fu[r, pu] = -1.0
            Fxi[r, 0] = res.p_lo[i]
            pi_col = 1 + 3 * n * t + 3 * i + PV
            for fam, sign in ((6, 1.0), (7, -1.0)):
                r = fam * per + k
                Fu[r, pu + 1] = sign
                if variant == "inner":
                    Fxi[r, 0] = -q_bar[i, t]
                else:
                    Fxi[r, 0] = -np.sqrt(2.0) * res.s[i]
                    Fxi[r, pi_col] = 1.0
    return ConstraintTriple(Fx.tocsr(), Fu.tocsr(), Fxi.tocsr())


def build_policy_mask(n, T) -> np.ndarray:
    """Free entries of ``Q``: constant column plus the own-bus history ``s <= t``."""
    mask = np.zeros((2 * n * T, 1 + 3 * n * T), dtype=bool)
    mask[:, 0] = True
    for t in range(T):
        for i in range(n):
            rows = slice(2 * n * t + 2 * i, 2 * n * t + 2 * i + 2)
            for s in range(t + 1):
                c0 = 1 + 3 * n * s + 3 * i
                mask[rows, c0:c0 + 3] = True
    return mask


def box_to_polytope(box: BoxSupport) -> np.ndarray:
    """``W`` with ``{xi : xi_1 = 1, W xi >= 0}`` equal to ``box``.

    Rows ``2j`` and ``2j+1`` encode ``xi_j - l_j >= 0`` and ``u_j - xi_j >= 0``.
    """
    N = box.lower.size
    W = np.zeros((2 * N, N + 1))
    j = np.arange(N)
    W[2 * j, 0] = -box.lower
    W[2 * j, j + 1] = 1.0
    W[2 * j + 1, 0] = box.upper
    W[2 * j + 1, j + 1] = -1.0
    return W


def input_activity(res: ResourceSet, T) -> np.ndarray:
    """Per input entry: False when the constraints pin the channel to zero.

    Storage with ``b = 0`` (and hence ``x0 = 0``) or ``p_lo = p_hi = 0`` can
    never move; an inverter with ``s = 0`` has no reactive range.
    """
    per_bus = np.stack([res.storage_active, res.inverter_active], axis=1).ravel()
    return np.tile(per_bus, T)


def assemble(scenario: Scenario) -> LiftedSystem:
    net, res, dm = scenario.network, scenario.resources, scenario.disturbance
    n, T = net.n, res.T
    sm = build_rx(net)
    B = build_step_input_map(n, res.delta)
    A, Bb, c = build_lifting(n, T, B)
    L_u, L_xi, Sigma = build_loss_maps(net, sm, n, T)
    V_u, V_xi = build_voltage_maps(sm)
    q_bar = reactive_headroom(dm, res.s)
    args = (n, T, V_u, V_xi, q_bar, res, net.v_lo, net.v_hi, net.v0)
    F_in = build_constraint_triples(*args, variant="inner")
    F_out = build_constraint_triples(*args, variant="outer")
    return LiftedSystem(
        n=n, T=T, delta=res.delta, x0=res.x0.copy(), A=A, Bb=Bb, B=B, c=c,
        L_u=L_u, L_xi=L_xi, Sigma=Sigma, V_u=V_u, V_xi=V_xi, F_in=F_in, F_out=F_out,
        q_bar=q_bar, S_mask=build_policy_mask(n, T), input_active=input_activity(res, T),
        v0=net.v0, v_lo=net.v_lo.copy(), v_hi=net.v_hi.copy(), b=res.b.copy(),
        p_lo=res.p_lo.copy(), p_hi=res.p_hi.copy(), s=res.s.copy())


def support_matrix(dm: DisturbanceModel) -> np.ndarray:
    """``W`` for the model's support, whatever its representation."""
    if isinstance(dm.support, PolytopeSupport):
        return dm.support.W
    return box_to_polytope(dm.support)
