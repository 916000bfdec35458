"""Monte Carlo evaluation of policies at the slow and the fast time-scale.

Violations are always measured against the true constraints: voltage
magnitudes (kV) in their window, storage state in ``[0, b]``, storage power
in ``[p_lo, p_hi]`` and the inverter disk ``qI^2 + pI^2 <= s^2``.  A value
counts as a violation only beyond ``SLACK``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .assembly import LiftedSystem
from .scenario import (PV, AssumptionViolation, BoxSupport, DisturbanceModel, RNG_BLOCK,
                       sample_batch, transform_uniforms, uniform_stream)

SLACK = 1e-6
TRUE_FAMILIES = ("v_hi", "v_lo", "x_hi", "x_lo", "p_hi", "p_lo", "s_disk")
#: trajectories kept for quantile bands when ``keep`` is not given
DEFAULT_KEEP = 20000


@dataclass
class TrajectoryBatch:
    """Outcome of a rollout.

    ``counts[f][i, t]`` is the number of samples violating family ``f`` at
    bus ``i`` (0-based) in period ``t`` (at any sub-period for fast
    rollouts); ``worst[f]`` holds the largest magnitude seen.  Full
    trajectories are retained for the first ``kept`` samples only:
    ``xi (kept, N_xi)`` (``(kept, K, N_xi - 1)`` fast disturbances for fast
    rollouts), ``u``, ``x`` and ``v`` (kV).
    """

    n: int
    T: int
    K: int
    costs: np.ndarray
    counts: dict
    worst: dict
    sample_violated: np.ndarray
    xi: np.ndarray | None = None
    u: np.ndarray | None = None
    x: np.ndarray | None = None
    v: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.costs.size

    @property
    def mean_cost(self):
        return float(np.mean(self.costs))

    @property
    def total_violations(self):
        return int(sum(int(c.sum()) for c in self.counts.values()))

    def family_total(self, family):
        return int(self.counts[family].sum())

    @property
    def voltage_violations(self):
        return self.family_total("v_hi") + self.family_total("v_lo")

    def violation_records(self):
        """``(family, bus label, t, count, worst magnitude)`` for every violated cell."""
        out = []
        for f in TRUE_FAMILIES:
            for i, t in zip(*np.nonzero(self.counts[f])):
                out.append((f, int(i) + 1, int(t), int(self.counts[f][i, t]), float(self.worst[f][i, t])))
        return out


def estimate_cost_ci(batch, level=0.99):
    """Sample mean and normal-approximation CI half-width of the per-sample cost."""
    costs = batch.costs if isinstance(batch, TrajectoryBatch) else np.asarray(batch, dtype=float)
    if costs.size < 2:
        raise ValueError("need at least two samples")
    mean = float(np.mean(costs))
    if np.ptp(costs) == 0:
        return mean, 0.0
    z = norm.ppf(0.5 + level / 2)
    return mean, float(z * np.std(costs, ddof=1) / np.sqrt(costs.size))


def _gain(policy):
    return np.asarray(getattr(policy, "Q", policy), dtype=float)


class _Accumulator:
    def __init__(self, n, T):
        self.counts = {f: np.zeros((n, T), dtype=np.int64) for f in TRUE_FAMILIES}
        self.worst = {f: np.zeros((n, T)) for f in TRUE_FAMILIES}
        self.flags = []

    def add(self, excess):
        """``excess[f]``: array ``(B, ..., T, n)`` of constraint excess; any leading
        axes between sample and period (sub-periods) are reduced by ``any``/``max``."""
        hit = None
        for f, e in excess.items():
            e = e.reshape(e.shape[0], -1, *e.shape[-2:]).max(axis=1)   # (B, T, n)
            viol = e > SLACK
            self.counts[f] += viol.sum(axis=0).T
            self.worst[f] = np.maximum(self.worst[f], np.where(viol, e, 0.0).max(axis=0).T)
            v = viol.any(axis=(1, 2))
            hit = v if hit is None else hit | v
        self.flags.append(hit)


def _excess(ls: LiftedSystem, v, x_next, pS, qI, pv):
    """Constraint excess (positive = violated).  Period axis is second to last."""
    return {
        "v_hi": v - ls.v_hi, "v_lo": ls.v_lo - v,
        "x_hi": x_next - ls.b, "x_lo": -x_next,
        "p_hi": pS - ls.p_hi, "p_lo": ls.p_lo - pS,
        "s_disk": np.sqrt(qI**2 + pv**2) - ls.s,
    }


def _loss(ls, sig, u, xi):
    f = u @ ls.L_u.T + xi @ ls.L_xi.T
    return (f * f) @ sig


def rollout(policy, ls: LiftedSystem, dm: DisturbanceModel, n_samples, seed, keep=None,
            chunk=RNG_BLOCK * 4) -> TrajectoryBatch:
    """Simulate ``u = Q xi`` on ``n_samples`` independent disturbance trajectories."""
    Q = _gain(policy)
    if Q.shape != (ls.N_u, ls.N_xi) or dm.N_xi != ls.N_xi:
        raise ValueError(f"policy is {Q.shape}, system needs {(ls.N_u, ls.N_xi)}")
    n, T = ls.n, ls.T
    keep = min(n_samples, DEFAULT_KEEP if keep is None else keep)
    sig = np.diag(ls.Sigma)
    acc = _Accumulator(n, T)
    costs = np.empty(n_samples)
    kept = {k: [] for k in ("xi", "u", "x", "v")}
    for start in range(0, n_samples, chunk):
        B = min(chunk, n_samples - start)
        xi = sample_batch(dm, B, seed, start)
        u = xi @ Q.T
        x = ls.x0 @ ls.A.T + u @ ls.Bb.T
        ut = u.reshape(B, T, 2 * n)
        xt = xi[:, 1:].reshape(B, T, 3 * n)
        v = np.sqrt(ut @ ls.V_u.T + xt @ ls.V_xi.T + ls.v0**2)
        costs[start:start + B] = x @ ls.c + _loss(ls, sig, u, xi)
        x_next = x[:, n:].reshape(B, T, n)
        acc.add(_excess(ls, v, x_next, ut[..., 0::2], ut[..., 1::2], xt[..., PV::3]))
        if start < keep:
            r = min(B, keep - start)
            for k, arr in (("xi", xi), ("u", u), ("x", x), ("v", v)):
                kept[k].append(arr[:r])
    return TrajectoryBatch(n, T, 1, costs, acc.counts, acc.worst, np.concatenate(acc.flags),
                           **{k: np.concatenate(a) if a else None for k, a in kept.items()})


# ---------------------------------------------------------------------------
# fast time-scale


@dataclass(frozen=True)
class FastDisturbanceModel:
    """Sub-period disturbances ``xi(k, t)``, ``k = 0..K-1``, independent across ``k``.

    ``law="uniform"`` draws each coordinate uniformly on ``[lower, upper]``,
    which defaults to the slow support box; ``law="slow"`` reuses the slow
    per-coordinate laws.  Fast supports must stay inside the slow box.
    """

    slow: DisturbanceModel
    K: int
    law: str = "uniform"
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.law not in ("uniform", "slow"):
            raise ValueError("law must be 'uniform' or 'slow'")
        if not isinstance(self.slow.support, BoxSupport):
            raise AssumptionViolation("fast rollouts need a box support at the slow time-scale")
        box = self.slow.support
        if self.law == "slow":
            lo, hi = self.slow.law_bounds()
        else:
            lo = box.lower if self.lower is None else np.asarray(self.lower, dtype=float)
            hi = box.upper if self.upper is None else np.asarray(self.upper, dtype=float)
        if lo.shape != box.lower.shape or hi.shape != box.upper.shape:
            raise ValueError("fast support bounds have the wrong length")
        out = (lo < box.lower - 1e-12) | (hi > box.upper + 1e-12)
        if np.any(out):
            j = int(np.flatnonzero(out)[0])
            raise AssumptionViolation(
                f"fast support of coordinate {j + 1} is [{lo[j]:.6g}, {hi[j]:.6g}], outside the slow box "
                f"[{box.lower[j]:.6g}, {box.upper[j]:.6g}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def sample(self, n_samples, seed, start=0):
        """``(n_samples, K, N_xi - 1)``; with ``K = 1`` and ``law='slow'`` (or
        uniform laws on the box) this reproduces :func:`sample_batch` exactly."""
        U = uniform_stream(seed, n_samples, (self.K, self.slow.N_xi - 1), start)
        if self.law == "slow":
            return transform_uniforms(self.slow, U)
        return self.lower + (self.upper - self.lower) * U


def fast_rollout(policy, ls: LiftedSystem, dm_fast: FastDisturbanceModel, K, n_samples, seed,
                 keep=None, chunk=RNG_BLOCK) -> TrajectoryBatch:
    """Apply the slow policy at ``K`` sub-periods per period.

    ``u(k,t) = Qbar(t) + Q(t,t) xi(k,t) + sum_{s<t} Q(t,s) xibar(s)`` with
    ``xibar(s)`` the realized sub-period average, and
    ``x(k+1,t) = x(k,t) + B u(k,t) / K``.  The cost is the terminal storage
    plus the sub-period average of the losses in each period.
    """
    if K != dm_fast.K:
        raise ValueError(f"K={K} does not match the fast disturbance model (K={dm_fast.K})")
    Q = _gain(policy)
    if Q.shape != (ls.N_u, ls.N_xi):
        raise ValueError(f"policy is {Q.shape}, system needs {(ls.N_u, ls.N_xi)}")
    n, T = ls.n, ls.T
    keep = min(n_samples, DEFAULT_KEEP if keep is None else keep)
    sig = np.diag(ls.Sigma)
    acc = _Accumulator(n, T)
    costs = np.empty(n_samples)
    kept = {k: [] for k in ("xi", "u", "x", "v")}
    two, three = 2 * n, 3 * n
    Lu0 = ls.L_u[:two, :two]
    Lx0 = ls.L_xi[:two, 1:1 + three]
    Bstep = ls.B / K
    for start in range(0, n_samples, chunk):
        Bn = min(chunk, n_samples - start)
        xf = dm_fast.sample(Bn, seed, start).reshape(Bn, K, T, three)
        xbar = xf.mean(axis=1).reshape(Bn, T * three)
        u = np.empty((Bn, K, T, two))
        x = np.empty((Bn, K + 1, T, n))
        v = np.empty((Bn, K, T, n))
        loss = np.zeros(Bn)
        state = np.broadcast_to(ls.x0, (Bn, n)).copy()
        for t in range(T):
            rows = slice(two * t, two * (t + 1))
            now = slice(1 + three * t, 1 + three * (t + 1))
            base = Q[rows, 0] + xbar[:, :three * t] @ Q[rows, 1:1 + three * t].T   # (Bn, 2n)
            u[:, :, t] = base[:, None, :] + xf[:, :, t] @ Q[rows, now].T
            x[:, 0, t] = state
            for k in range(K):
                state = state + u[:, k, t] @ Bstep.T
                x[:, k + 1, t] = state
            v[:, :, t] = np.sqrt(u[:, :, t] @ ls.V_u.T + xf[:, :, t] @ ls.V_xi.T + ls.v0**2)
            flow = u[:, :, t] @ Lu0.T + xf[:, :, t] @ Lx0.T
            loss += ((flow * flow) @ sig[:two]).mean(axis=1)
        costs[start:start + Bn] = state.sum(axis=1) + loss
        acc.add(_excess(ls, v, x[:, 1:], u[..., 0::2], u[..., 1::2], xf[..., PV::3]))
        if start < keep:
            r = min(Bn, keep - start)
            for name, arr in (("xi", xf), ("u", u), ("x", x), ("v", v)):
                kept[name].append(arr[:r])
    batch = TrajectoryBatch(n, T, K, costs, acc.counts, acc.worst, np.concatenate(acc.flags),
                            **{k: np.concatenate(a) if a else None for k, a in kept.items()})
    return batch


def fast_as_slow(batch: TrajectoryBatch):
    """Slow-shaped views ``(u, x, v)`` of a ``K = 1`` fast batch, for comparison."""
    if batch.K != 1:
        raise ValueError("only K = 1 batches have a slow-shaped equivalent")
    B = batch.u.shape[0]
    u = batch.u[:, 0].reshape(B, -1)
    x = np.concatenate([batch.x[:, 0], batch.x[:, 1, -1:]], axis=1).reshape(B, -1)
    v = batch.v[:, 0]
    return u, x, v


# ---------------------------------------------------------------------------
# CSV export


def _bands_source(batch: TrajectoryBatch):
    n, T = batch.n, batch.T
    B = batch.u.shape[0]
    if batch.K == 1 and batch.u.ndim == 2:
        u = batch.u.reshape(B, 1, T, 2 * n)
        x = batch.x.reshape(B, T + 1, n)
        v = batch.v.reshape(B, 1, T, n)
    else:
        u, v = batch.u, batch.v
        x = np.concatenate([batch.x[:, 0], batch.x[:, -1, -1:]], axis=1)  # period boundaries
    return {"v": v.reshape(-1, T, n), "qI": u[..., 1::2].reshape(-1, T, n),
            "pS": u[..., 0::2].reshape(-1, T, n), "x": x}


def write_costs_csv(batch: TrajectoryBatch, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "cost_mwh"])
        w.writerows((k, repr(float(c))) for k, c in enumerate(batch.costs))


def write_violations_csv(batch: TrajectoryBatch, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bus", "t", *TRUE_FAMILIES])
        for i in range(batch.n):
            for t in range(batch.T):
                w.writerow([i + 1, t, *(int(batch.counts[fam][i, t]) for fam in TRUE_FAMILIES)])


def write_bands_csv(batch: TrajectoryBatch, path, quantiles=(0.05, 0.5, 0.95)):
    """Per-(quantity, bus, t) quantiles over the retained trajectories."""
    if batch.u is None:
        raise ValueError("batch keeps no trajectories")
    src = _bands_source(batch)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["quantity", "bus", "t", *(f"q{round(100 * q):02d}" for q in quantiles)])
        for name, arr in src.items():
            qs = np.quantile(arr, quantiles, axis=0)      # (nq, periods, n)
            for i in range(arr.shape[2]):
                for t in range(arr.shape[1]):
                    w.writerow([name, i + 1, t, *(repr(float(qs[k, t, i])) for k in range(len(quantiles)))])
