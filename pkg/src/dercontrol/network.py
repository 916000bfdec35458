"""Radial feeder model and linearized DistFlow sensitivities.

Buses are indexed internally 0..n-1 for the non-root buses; external labels
are 1-based (label ``i + 1``), with label 0 reserved for the substation.
Each non-root bus owns exactly one line, the one connecting it to its parent,
so lines are indexed by their downstream (child) bus.

Units are physical: ohms, MW, Mvar, kV.  With these, ohm * MW = kV^2, so
``v^2 = R p + X q + v0^2`` needs no per-unit scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NetworkModelError(ValueError):
    """Raised when a feeder description is not a valid rooted tree."""


@dataclass(frozen=True)
class RadialNetwork:
    """Rooted-tree feeder.

    Attributes
    ----------
    parent : ndarray of int, shape (n,)
        ``parent[i]`` is the external label (0 = substation) of the parent of
        bus label ``i + 1``.
    r_line, x_line : ndarray, shape (n,)
        Resistance / reactance of the line feeding each bus, ohms.
    v0 : float
        Substation voltage magnitude, kV.
    v_lo, v_hi : ndarray, shape (n,)
        Voltage magnitude bounds, kV.
    """

    parent: np.ndarray
    r_line: np.ndarray
    x_line: np.ndarray
    v0: float
    v_lo: np.ndarray
    v_hi: np.ndarray

    def __post_init__(self):
        n = len(self.parent)
        object.__setattr__(self, "parent", np.asarray(self.parent, dtype=int))
        for name in ("r_line", "x_line", "v_lo", "v_hi"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "v0", float(self.v0))
        self.parent.setflags(write=False)
        _root_paths(self.parent)  # raises on cycles / orphans
        if np.any(self.r_line <= 0) or np.any(self.x_line <= 0):
            raise NetworkModelError("line resistance and reactance must be positive")
        if not (np.all(self.v_lo > 0) and np.all(self.v_lo < self.v0) and np.all(self.v0 < self.v_hi)):
            raise NetworkModelError("voltage bounds must satisfy 0 < v_lo < v0 < v_hi at every bus")

    @property
    def n(self) -> int:
        return len(self.parent)

    @property
    def v_lo_sq(self) -> np.ndarray:
        return self.v_lo**2

    @property
    def v_hi_sq(self) -> np.ndarray:
        return self.v_hi**2

    @classmethod
    def from_per_unit(cls, parent, r_line, x_line, v_base_kv, v0_pu=1.0, v_lo_pu=0.95, v_hi_pu=1.05):
        """Build a feeder whose voltages are given per unit of ``v_base_kv``."""
        n = len(parent)
        v_lo = np.broadcast_to(np.asarray(v_lo_pu, dtype=float), (n,)) * v_base_kv
        v_hi = np.broadcast_to(np.asarray(v_hi_pu, dtype=float), (n,)) * v_base_kv
        return cls(parent, r_line, x_line, v0_pu * v_base_kv, v_lo, v_hi)

    @classmethod
    def path(cls, n, r=0.466, x=0.733, v0=12.0, v_lo=0.95 * 12.0, v_hi=1.05 * 12.0):
        """Feeder 0 -> 1 -> ... -> n with identical lines."""
        return cls(np.arange(n), np.full(n, r), np.full(n, x), v0, np.full(n, v_lo), np.full(n, v_hi))


def _root_paths(parent: np.ndarray) -> list[list[int]]:
    """For every bus, the lines (child indices) on its path from the root."""
    n = len(parent)
    paths = []
    for start in range(n):
        chain = [start]
        while (p := int(parent[chain[-1]])) != 0:
            if not 1 <= p <= n:
                raise NetworkModelError(f"bus {chain[-1] + 1} has unknown parent {p}")
            if len(chain) > n:
                raise NetworkModelError(f"cycle through bus {start + 1}")
            chain.append(p - 1)
        paths.append(chain[::-1])
    return paths


@dataclass(frozen=True)
class SensitivityMatrices:
    """Voltage sensitivities and line/subtree bookkeeping.

    ``subtree[j]`` is the sorted tuple of buses downstream of (and including)
    the child bus of line ``j``.
    """

    R: np.ndarray
    X: np.ndarray
    subtree: tuple = field(repr=False)
    paths: tuple = field(repr=False)


def build_rx(net: RadialNetwork) -> SensitivityMatrices:
    """Path-intersection sensitivities: ``R_ij = 2 * sum of r over P_i & P_j``."""
    paths = _root_paths(net.parent)
    n = net.n
    R = np.zeros((n, n))
    X = np.zeros((n, n))
    sets = [set(p) for p in paths]
    for i in range(n):
        for j in range(i, n):
            common = sorted(sets[i] & sets[j])
            R[i, j] = R[j, i] = 2.0 * net.r_line[common].sum()
            X[i, j] = X[j, i] = 2.0 * net.x_line[common].sum()
    subtree = tuple(tuple(k for k in range(n) if j in sets[k]) for j in range(n))
    for M in (R, X):
        M.setflags(write=False)
    return SensitivityMatrices(R, X, subtree, tuple(tuple(p) for p in paths))


def voltage_squared(net: RadialNetwork, sm: SensitivityMatrices, p, q) -> np.ndarray:
    """Squared bus voltages (kV^2) for net injections ``p`` (MW) and ``q`` (Mvar).

    Trailing axes broadcast, so ``p`` may be ``(n,)`` or ``(..., n)``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[-1] != net.n or q.shape[-1] != net.n:
        raise ValueError(f"injection vectors must have length {net.n}")
    return p @ sm.R.T + q @ sm.X.T + net.v0**2
