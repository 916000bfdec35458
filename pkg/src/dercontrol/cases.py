"""Ready-made scenarios: the 14-bus case-study feeder and a small desk feeder.

The 14-bus feeder's exact topology is not tabulated in the source material;
``FEEDER14_PARENT`` is a branched tree of the same size with the resource and
load buses in the stated positions.
"""

from __future__ import annotations

import numpy as np

from .network import RadialNetwork
from .scenario import (ResourceSet, Scenario, load_profile, pv_profile,
                       standard_disturbance_model)

#: parent label of buses 1..14 (0 = substation)
FEEDER14_PARENT = (0, 1, 2, 3, 4, 5, 6, 2, 8, 9, 3, 11, 12, 13)


def build_case(parent, resource_buses, load_buses, theta, *, T=24, start_hour=0, delta=1.0,
               r=0.466, x=0.733, v_base=12.0, v0_pu=1.0, v_lo_pu=0.95, v_hi_pu=1.05,
               b=0.5, p_lo=-0.2, p_hi=0.2, x0=0.0, s_factor=1.25, p_base=0.3,
               power_factor=0.95, load_spread=0.3, support=None) -> Scenario:
    """Scenario with identical storage/PV units and identical loads.

    Bus lists use external labels (1-based).  Storage data may be scalars or
    one value per resource bus.  Means follow
    :func:`~dercontrol.scenario.pv_profile` and
    :func:`~dercontrol.scenario.load_profile` at hours
    ``start_hour + t * delta``.
    """
    n = len(parent)
    line = (lambda v: np.broadcast_to(np.asarray(v, dtype=float), (n,)))
    net = RadialNetwork.from_per_unit(parent, line(r), line(x), v_base, v0_pu, v_lo_pu, v_hi_pu)
    res_idx = [i - 1 for i in resource_buses]
    load_idx = [i - 1 for i in load_buses]
    for i in res_idx + load_idx:
        if not 0 <= i < n:
            raise ValueError(f"bus label {i + 1} outside 1..{n}")

    def on_resources(value):
        out = np.zeros(n)
        out[res_idx] = np.broadcast_to(np.asarray(value, dtype=float), (len(res_idx),))
        return out

    has_load = np.zeros(n, bool)
    has_load[load_idx] = True
    res = ResourceSet(b=on_resources(b), p_lo=on_resources(p_lo), p_hi=on_resources(p_hi),
                      x0=on_resources(x0), s=on_resources(s_factor * theta),
                      has_load=has_load, delta=delta, T=T)
    hours = start_hour + delta * np.arange(T)
    mu_p, mu_q = load_profile(p_base, hours, power_factor)
    mu_pv = pv_profile(theta, hours)
    dm = standard_disturbance_model(n, T, load_idx, res_idx, mu_p, mu_q, mu_pv, load_spread, support)
    return Scenario(net, res, dm)


def feeder14(theta=4.0, **kw) -> Scenario:
    """The 14-bus, 24-hour case study: resources at buses 4 and 8, loads at 3, 4, 5, 13, 14."""
    return build_case(FEEDER14_PARENT, (4, 8), (3, 4, 5, 13, 14), theta, **kw)


def desk_feeder(theta=2.0, **kw) -> Scenario:
    """Four-bus path over eight daytime hours with storage and PV at buses 2 and 4."""
    kw.setdefault("T", 8)
    kw.setdefault("start_hour", 8)
    kw.setdefault("p_base", 0.25)
    return build_case((0, 1, 2, 3), (2, 4), (1, 2, 3, 4), theta, **kw)
