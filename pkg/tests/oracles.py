"""Independent reference computations shared by the test modules."""

from itertools import combinations

import numpy as np

from dercontrol.scenario import LOAD_P, LOAD_Q, PV


def active_set_oracle(H, g, A_eq, b_eq, A_in, b_in, tol=1e-10):
    """Solve a small strictly convex QP by trying every active set.

    For each subset of inequalities treated as equalities the KKT system is
    solved directly; the candidate that is primal feasible with nonnegative
    multipliers and lowest objective is returned as ``(z, value)``.
    """
    d = H.shape[0]
    best = None
    for k in range(A_in.shape[0] + 1):
        for act in combinations(range(A_in.shape[0]), k):
            Aa = np.vstack([A_eq, A_in[list(act)]])
            ba = np.concatenate([b_eq, b_in[list(act)]])
            if Aa.shape[0] > d or (Aa.shape[0] and np.linalg.matrix_rank(Aa) < Aa.shape[0]):
                continue
            K = np.block([[H, Aa.T], [Aa, np.zeros((Aa.shape[0], Aa.shape[0]))]])
            sol = np.linalg.solve(K, np.concatenate([-g, ba]))
            z, mult = sol[:d], sol[d:]
            lam = mult[A_eq.shape[0]:]
            if np.any(lam < -tol) or np.any(A_in @ z - b_in > tol * (1 + np.abs(b_in).max(initial=0))):
                continue
            val = 0.5 * z @ H @ z + g @ z
            if best is None or val < best[1]:
                best = (z, val)
    return best


def random_convex_qp(rng, d_max=10, n_in_max=6, n_eq_max=2):
    """Feasible strictly convex QP with ``d <= d_max`` and ``<= n_in_max`` inequalities."""
    d = int(rng.integers(1, d_max + 1))
    n_in = int(rng.integers(0, n_in_max + 1))
    n_eq = int(rng.integers(0, min(n_eq_max, d - 1) + 1))
    L = rng.normal(size=(d, d))
    H = L @ L.T + rng.uniform(0.05, 1.0) * np.eye(d)
    g = rng.normal(0, 3, d)
    z0 = rng.normal(size=d)
    A_eq = rng.normal(size=(n_eq, d))
    b_eq = A_eq @ z0
    A_in = rng.normal(size=(n_in, d))
    b_in = A_in @ z0 + rng.uniform(0, 1, n_in)
    return H, g, A_eq, b_eq, A_in, b_in


def box_vertices(lower, upper):
    """All vertices of a box (as rows), one per sign pattern."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    N = lower.size
    bits = (np.arange(2**N)[:, None] >> np.arange(N)) & 1
    return np.where(bits == 1, upper, lower)


def descendants(parent):
    n = len(parent)
    out = []
    for j in range(1, n + 1):
        sub = []
        for k in range(1, n + 1):
            a = k
            while a != 0 and a != j:
                a = parent[a - 1]
            if a == j:
                sub.append(k - 1)
        out.append(sub)
    return out


def step_oracle(sc, u, xi):
    """Step-by-step rollout: storage bookkeeping, DistFlow flows and voltages
    recursed down the tree, losses summed line by line."""
    net, res = sc.network, sc.resources
    n, T = net.n, res.T
    parent = [int(p) for p in net.parent]
    sub = descendants(parent)
    x = res.x0.copy()
    loss = 0.0
    vsq = np.zeros((T, n))
    for t in range(T):
        pS = u[2 * n * t:2 * n * (t + 1):2]
        qI = u[2 * n * t + 1:2 * n * (t + 1):2]
        blk = xi[1 + 3 * n * t:1 + 3 * n * (t + 1)].reshape(n, 3)
        p_cons = blk[:, LOAD_P] - blk[:, PV] - pS
        q_cons = blk[:, LOAD_Q] - qI
        P = np.array([p_cons[s].sum() for s in sub])
        Q = np.array([q_cons[s].sum() for s in sub])
        loss += np.sum(net.r_line * (P**2 + Q**2)) / net.v0**2
        # children are visited after their parents since labels need not be ordered
        done = {0: net.v0**2}
        while len(done) <= n:
            for j in range(1, n + 1):
                if j not in done and parent[j - 1] in done:
                    done[j] = done[parent[j - 1]] - 2 * (net.r_line[j - 1] * P[j - 1] + net.x_line[j - 1] * Q[j - 1])
        vsq[t] = [done[j] for j in range(1, n + 1)]
        x = x - res.delta * pS
    return x.sum() + loss, vsq


def deterministic_oracle(sc, xi, q_bar):
    """Open-loop optimum for a single known disturbance trajectory.

    Solved with SLSQP on the step-by-step model; channels without capacity
    are fixed at zero through the variable bounds.
    """
    from scipy.optimize import minimize

    net, res = sc.network, sc.resources
    n, T = net.n, res.T
    bounds = []
    for t in range(T):
        for i in range(n):
            bounds.append((res.p_lo[i], res.p_hi[i]) if res.storage_active[i] else (0.0, 0.0))
            bounds.append((-q_bar[i, t], q_bar[i, t]) if res.inverter_active[i] else (0.0, 0.0))

    def states(u):
        pS = u[0::2].reshape(T, n)
        return res.x0 - res.delta * np.cumsum(pS, axis=0)

    def ineq(u):
        _, vsq = step_oracle(sc, u, xi)
        x = states(u)
        return np.concatenate([(net.v_hi**2 - vsq).ravel(), (vsq - net.v_lo**2).ravel(),
                               (res.b - x).ravel(), x.ravel()])

    out = minimize(lambda u: step_oracle(sc, u, xi)[0], np.zeros(2 * n * T), method="SLSQP",
                   bounds=bounds, constraints=[{"type": "ineq", "fun": ineq}],
                   options={"ftol": 1e-14, "maxiter": 1000})
    assert out.success, out.message
    return out.fun, out.x
