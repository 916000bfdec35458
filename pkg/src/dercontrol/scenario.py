"""Resources, disturbance laws, supports and second-order moments.

The disturbance trajectory is ``xi = (1, xi(0), ..., xi(T-1))`` with
``xi(t) = (xi_1(t), ..., xi_n(t))`` and ``xi_i(t) = (p, q, I)``: local active
demand, local reactive demand and PV active supply.  Coordinate ``k`` of bus
``i`` at period ``t`` lives at index ``1 + 3*n*t + 3*i + k`` of ``xi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import special, stats

LOAD_P, LOAD_Q, PV = 0, 1, 2
COMPONENTS = ("p", "q", "I")

#: samples drawn per independent RNG stream; streams are keyed by (seed, block)
RNG_BLOCK = 1024


class ScenarioError(ValueError):
    """Raised for inconsistent resource or disturbance data."""


class AssumptionViolation(ScenarioError):
    """A fast-time-scale law leaves the slow per-period support."""


# ---------------------------------------------------------------------------
# per-coordinate laws


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float

    def __post_init__(self):
        if not self.a <= self.b:
            raise ScenarioError(f"Uniform[{self.a}, {self.b}] has a > b")

    @property
    def lower(self):
        return self.a

    @property
    def upper(self):
        return self.b

    def mean(self):
        return 0.5 * (self.a + self.b)

    def var(self):
        return (self.b - self.a) ** 2 / 12.0

    def second_moment(self):
        return (self.a**2 + self.a * self.b + self.b**2) / 3.0

    def ppf(self, u):
        return self.a + (self.b - self.a) * u


@dataclass(frozen=True)
class TruncatedGaussian:
    mu: float
    sigma: float
    a: float
    b: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.a < self.b):
            raise ScenarioError("TruncatedGaussian needs sigma > 0 and a < b")

    @property
    def _law(self):
        return stats.truncnorm((self.a - self.mu) / self.sigma, (self.b - self.mu) / self.sigma,
                               loc=self.mu, scale=self.sigma)

    @property
    def lower(self):
        return self.a

    @property
    def upper(self):
        return self.b

    def mean(self):
        return float(self._law.mean())

    def var(self):
        return float(self._law.var())

    def second_moment(self):
        return self.var() + self.mean() ** 2

    def ppf(self, u):
        lo = special.ndtr((self.a - self.mu) / self.sigma)
        hi = special.ndtr((self.b - self.mu) / self.sigma)
        z = special.ndtri(lo + (hi - lo) * u)
        return np.clip(self.mu + self.sigma * z, self.a, self.b)


@dataclass(frozen=True)
class PointMass:
    c: float

    @property
    def lower(self):
        return self.c

    @property
    def upper(self):
        return self.c

    def mean(self):
        return self.c

    def var(self):
        return 0.0

    def second_moment(self):
        return self.c**2

    def ppf(self, u):
        return np.full(np.shape(u), self.c)


Law = Union[Uniform, TruncatedGaussian, PointMass]


# ---------------------------------------------------------------------------
# supports


@dataclass(frozen=True)
class BoxSupport:
    """Coordinate-wise interval for the non-constant entries of ``xi``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ScenarioError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ScenarioError("box support must be bounded")
        if np.any(lo > hi):
            j = int(np.argmax(lo > hi))
            raise ScenarioError(f"box coordinate {j} has lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self):
        return 0.5 * (self.upper - self.lower)

    def contains(self, xi, tol=0.0):
        xi = np.asarray(xi)
        body = xi[..., 1:]
        return (np.abs(xi[..., 0] - 1.0) <= tol) & np.all(
            (body >= self.lower - tol) & (body <= self.upper + tol), axis=-1)


@dataclass(frozen=True)
class PolytopeSupport:
    """``{xi : xi_1 = 1, W xi >= 0}``; must be bounded."""

    W: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W", np.atleast_2d(np.asarray(self.W, dtype=float)))

    def contains(self, xi, tol=0.0):
        xi = np.asarray(xi)
        return (np.abs(xi[..., 0] - 1.0) <= tol) & np.all(xi @ self.W.T >= -tol, axis=-1)


Support = Union[BoxSupport, PolytopeSupport]


# ---------------------------------------------------------------------------
# resources and disturbance model


@dataclass(frozen=True)
class ResourceSet:
    """Per-bus storage and inverter data.  Buses without a device carry zeros."""

    b: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    x0: np.ndarray
    s: np.ndarray
    has_load: np.ndarray
    delta: float
    T: int

    def __post_init__(self):
        n = len(self.b)
        for name in ("b", "p_lo", "p_hi", "x0", "s"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "has_load", np.broadcast_to(np.asarray(self.has_load, bool), (n,)).copy())
        if self.delta <= 0 or self.T < 1:
            raise ScenarioError("need delta > 0 and T >= 1")
        if np.any(self.x0 < 0) or np.any(self.x0 > self.b):
            raise ScenarioError("initial storage state must lie in [0, b]")
        if np.any(self.p_lo > self.p_hi):
            raise ScenarioError("storage power bounds need p_lo <= p_hi")
        if np.any(self.s < 0):
            raise ScenarioError("inverter capacity must be nonnegative")

    @property
    def n(self):
        return len(self.b)

    @property
    def storage_active(self):
        """Buses whose storage input is not pinned to zero by its bounds."""
        return (self.b > 0) & ~((self.p_lo == 0) & (self.p_hi == 0))

    @property
    def inverter_active(self):
        return self.s > 0

    @classmethod
    def empty(cls, n, T, delta=1.0):
        z = np.zeros(n)
        return cls(z, z, z, z, z, np.zeros(n, bool), delta, T)


@dataclass(frozen=True)
class DisturbanceModel:
    """Independent per-coordinate laws plus a support set.

    ``laws`` has length ``3 n T`` in ``xi`` order (constant excluded).  When
    ``support`` is omitted the exact box hull of the laws is used.
    ``independent=False`` marks a model outside the class for which the
    lower bound is certified.
    """

    n: int
    T: int
    laws: tuple
    support: Support | None = None
    independent: bool = True
    _plan: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.laws) != 3 * self.n * self.T:
            raise ScenarioError(f"expected {3 * self.n * self.T} laws, got {len(self.laws)}")
        object.__setattr__(self, "laws", tuple(self.laws))
        lo = np.array([law.lower for law in self.laws], dtype=float)
        hi = np.array([law.upper for law in self.laws], dtype=float)
        if self.support is None:
            object.__setattr__(self, "support", BoxSupport(lo, hi))
        elif isinstance(self.support, BoxSupport):
            if self.support.lower.shape != lo.shape:
                raise ScenarioError("box support has the wrong dimension")
            if np.any(lo < self.support.lower - 1e-12) or np.any(hi > self.support.upper + 1e-12):
                raise ScenarioError("a law's support leaves the declared box")
        else:
            if self.support.W.shape[1] != self.N_xi:
                raise ScenarioError("polytope matrix W has the wrong number of columns")
        if np.any(lo[PV::3] < 0):
            raise ScenarioError("PV supply must be nonnegative")
        object.__setattr__(self, "_plan", _sampling_plan(self.laws))

    @property
    def N_xi(self):
        return 1 + 3 * self.n * self.T

    def index(self, t, bus, comp):
        """Position of coordinate ``comp`` of internal bus ``bus`` at ``t`` in ``xi``."""
        return 1 + 3 * self.n * t + 3 * bus + comp

    @property
    def mean(self):
        return np.concatenate([[1.0], [law.mean() for law in self.laws]])

    @property
    def var(self):
        return np.concatenate([[0.0], [law.var() for law in self.laws]])

    def law_bounds(self):
        lo = np.array([law.lower for law in self.laws])
        hi = np.array([law.upper for law in self.laws])
        return lo, hi

    def box(self) -> BoxSupport:
        """The support if it is a box, otherwise its coordinate-wise bounding box."""
        if isinstance(self.support, BoxSupport):
            return self.support
        return polytope_bounding_box(self.support)


def _sampling_plan(laws):
    kinds = {"uniform": [], "point": [], "tgauss": []}
    for j, law in enumerate(laws):
        if isinstance(law, Uniform):
            kinds["uniform"].append(j)
        elif isinstance(law, PointMass):
            kinds["point"].append(j)
        elif isinstance(law, TruncatedGaussian):
            kinds["tgauss"].append(j)
        else:
            raise ScenarioError(f"unsupported law {law!r}")
    plan = {k: np.array(v, dtype=int) for k, v in kinds.items()}
    plan["ua"] = np.array([laws[j].a for j in plan["uniform"]])
    plan["ub"] = np.array([laws[j].b for j in plan["uniform"]])
    plan["pc"] = np.array([laws[j].c for j in plan["point"]])
    return plan


def polytope_bounding_box(support: PolytopeSupport) -> BoxSupport:
    """Coordinate-wise bounds of a polytope support via LPs."""
    from scipy.optimize import linprog

    W = support.W
    N = W.shape[1]
    bounds = [(1.0, 1.0)] + [(None, None)] * (N - 1)
    lo = np.empty(N - 1)
    hi = np.empty(N - 1)
    for j in range(1, N):
        c = np.zeros(N)
        for sign, out in ((1.0, lo), (-1.0, hi)):
            c[j] = sign
            res = linprog(c, A_ub=-W, b_ub=np.zeros(W.shape[0]), bounds=bounds, method="highs")
            if res.status == 3:
                raise ScenarioError(f"support is unbounded along coordinate {j}")
            if res.status != 0:
                raise ScenarioError(f"support LP failed ({res.message})")
            out[j - 1] = sign * res.fun
    return BoxSupport(lo, hi)


# ---------------------------------------------------------------------------
# moments


@dataclass(frozen=True)
class MomentMatrix:
    M: np.ndarray
    positive_definite: bool

    @property
    def mean(self):
        return self.M[:, 0].copy()

    @property
    def covariance(self):
        mu = self.M[1:, 0]
        return self.M[1:, 1:] - np.outer(mu, mu)

    def regularized(self, eps):
        """Add ``eps`` variance to every random coordinate."""
        M = self.M.copy()
        M[1:, 1:] += eps * np.eye(M.shape[0] - 1)
        return MomentMatrix(M, True)


def compute_moment_matrix(dm: DisturbanceModel) -> MomentMatrix:
    """``M = E[xi xi']`` under coordinate independence: ``mu mu' + diag(var)``.

    Zero-variance coordinates make ``M`` singular; this is reported through
    ``positive_definite`` rather than raised.
    """
    mu = dm.mean
    var = dm.var
    M = np.outer(mu, mu) + np.diag(var)
    pd = bool(np.all(var[1:] > 0))
    M.setflags(write=False)
    return MomentMatrix(M, pd)


# ---------------------------------------------------------------------------
# sampling


def uniform_stream(seed, n_samples, shape, start=0):
    """Uniform draws of shape ``(n_samples, *shape)`` for samples ``start, start+1, ...``.

    Sample ``i`` depends only on ``(seed, i // RNG_BLOCK, i % RNG_BLOCK)``,
    so any split of the batch across workers reproduces the same values.
    """
    out = np.empty((n_samples, *shape))
    stop = start + n_samples
    for blk in range(start // RNG_BLOCK, -(-stop // RNG_BLOCK)):
        b0 = blk * RNG_BLOCK
        draws = np.random.default_rng([int(seed), blk]).random((RNG_BLOCK, *shape))
        lo, hi = max(b0, start), min(b0 + RNG_BLOCK, stop)
        out[lo - start:hi - start] = draws[lo - b0:hi - b0]
    return out


def transform_uniforms(dm: DisturbanceModel, U):
    """Map uniforms (last axis = ``3nT`` coordinates) through each law's quantile."""
    plan = dm._plan
    body = np.empty(U.shape)
    if plan["uniform"].size:
        j = plan["uniform"]
        body[..., j] = plan["ua"] + (plan["ub"] - plan["ua"]) * U[..., j]
    if plan["point"].size:
        body[..., plan["point"]] = plan["pc"]
    for j in plan["tgauss"]:
        body[..., j] = dm.laws[j].ppf(U[..., j])
    return body


def sample_batch(dm: DisturbanceModel, n_samples, seed, start=0):
    """``(n_samples, N_xi)`` array of independent disturbance trajectories."""
    U = uniform_stream(seed, n_samples, (dm.N_xi - 1,), start)
    body = transform_uniforms(dm, U)
    return np.concatenate([np.ones((n_samples, 1)), body], axis=1)


def sample_trajectory(dm: DisturbanceModel, rng_seed) -> np.ndarray:
    """One disturbance trajectory; reproducible given ``rng_seed``."""
    return sample_batch(dm, 1, rng_seed)[0]


def check_assumption1(dm: DisturbanceModel) -> bool:
    """True iff the model belongs to a class known to satisfy the conditional-
    expectation linearity needed by the lower bound: here, mutual independence
    of all per-bus, per-period disturbance blocks."""
    return bool(dm.independent)


# ---------------------------------------------------------------------------
# profiles


def pv_profile(theta, t):
    """Mean PV active supply (MW) at hour ``t`` for active capacity ``theta``."""
    return theta * np.maximum(0.5 * np.sin((np.asarray(t, dtype=float) - 6.0) * np.pi / 12.0), 0.0)


def load_profile(p_base, t, power_factor=0.95):
    """Synthetic stand-in for the mean active/reactive demand at hour ``t``.

    A smooth daytime peak, ``p_base * (0.6 + 0.4 max(sin((t-8) pi/14), 0))``;
    reactive demand follows at a fixed power factor.  This is NOT a measured
    utility profile.
    """
    t = np.asarray(t, dtype=float)
    mu_p = p_base * (0.6 + 0.4 * np.maximum(np.sin((t - 8.0) * np.pi / 14.0), 0.0))
    mu_q = mu_p * math.tan(math.acos(power_factor))
    return mu_p, mu_q


def standard_disturbance_model(n, T, load_buses, pv_buses, mu_p, mu_q, mu_pv,
                               load_spread=0.3, support=None) -> DisturbanceModel:
    """Independent uniform laws: loads on ``[(1-s) mu, (1+s) mu]``, PV on
    ``[0, 2 mu_pv]``; every other coordinate is identically zero.

    ``mu_*`` are arrays of shape ``(T,)`` (shared by all listed buses) or
    ``(T, n)``.  Bus lists use internal 0-based indices.
    """
    def per_bus(arr):
        arr = np.asarray(arr, dtype=float)
        return np.broadcast_to(arr[:, None] if arr.ndim == 1 else arr, (T, n))

    mp, mq, mi = per_bus(mu_p), per_bus(mu_q), per_bus(mu_pv)
    load_set, pv_set = set(load_buses), set(pv_buses)
    laws = []
    for t in range(T):
        for i in range(n):
            for comp, mean in ((LOAD_P, mp[t, i]), (LOAD_Q, mq[t, i])):
                if i in load_set and mean != 0.0 and load_spread > 0:
                    lo, hi = sorted(((1 - load_spread) * mean, (1 + load_spread) * mean))
                    laws.append(Uniform(lo, hi))
                else:
                    laws.append(PointMass(mean if i in load_set else 0.0))
            if i in pv_set and mi[t, i] > 0:
                laws.append(Uniform(0.0, 2.0 * mi[t, i]))
            else:
                laws.append(PointMass(0.0))
    return DisturbanceModel(n, T, tuple(laws), support)


@dataclass(frozen=True)
class Scenario:
    """Everything needed to assemble the control problem."""

    network: object
    resources: ResourceSet
    disturbance: DisturbanceModel

    def __post_init__(self):
        n = self.network.n
        if self.resources.n != n or self.disturbance.n != n or self.disturbance.T != self.resources.T:
            raise ScenarioError("network, resources and disturbance dimensions disagree")
