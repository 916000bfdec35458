import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dercontrol.assembly import (FAMILIES, assemble, box_to_polytope, build_lifting, build_policy_mask,
                                 build_step_input_map)
from dercontrol.cases import build_case, desk_feeder
from dercontrol.scenario import PV, BoxSupport, ScenarioError, sample_batch
from oracles import step_oracle


def branched_case(**kw):
    return build_case((0, 1, 2, 2, 1, 5), (2, 4, 6), (1, 3, 4, 6), 1.5, T=4, start_hour=10,
                      r=[0.3, 0.4, 0.5, 0.2, 0.6, 0.35], x=[0.5, 0.6, 0.3, 0.4, 0.7, 0.45],
                      b=[0.5, 0.3, 0.4], x0=[0.2, 0.1, 0.0], **kw)


@pytest.mark.parametrize("case", [desk_feeder, branched_case])
def test_lifted_cost_and_voltage_match_step_oracle(case):
    sc = case()
    ls = assemble(sc)
    rng = np.random.default_rng(0)
    X = sample_batch(sc.disturbance, 20, seed=3)
    for xi in X:
        u = rng.normal(0, 0.1, ls.N_u)
        xs = ls.A @ ls.x0 + ls.Bb @ u
        flows = ls.L_u @ u + ls.L_xi @ xi
        cost = ls.c @ xs + flows @ ls.Sigma @ flows
        ref, vsq = step_oracle(sc, u, xi)
        assert cost == pytest.approx(ref, rel=1e-10)
        for t in range(ls.T):
            v2 = (ls.V_u @ u[2 * ls.n * t:2 * ls.n * (t + 1)]
                  + ls.V_xi @ xi[1 + 3 * ls.n * t:1 + 3 * ls.n * (t + 1)] + ls.v0**2)
            np.testing.assert_allclose(v2, vsq[t], rtol=1e-12)


def test_constraint_rows_match_direct_evaluation():
    sc = branched_case()
    ls = assemble(sc)
    rng = np.random.default_rng(1)
    xi = sample_batch(sc.disturbance, 1, seed=2)[0]
    u = rng.normal(0, 0.1, ls.N_u)
    xs = ls.A @ ls.x0 + ls.Bb @ u
    F = ls.F_in
    rows = F.Fx @ xs + F.Fu @ u + F.Fxi @ xi
    _, vsq = step_oracle(sc, u, xi)
    n, T = ls.n, ls.T
    for r in range(ls.m):
        fam, bus, t = ls.row_info(r)
        i = bus - 1
        pS, qI = u[2 * n * t + 2 * i], u[2 * n * t + 2 * i + 1]
        x_next = xs[n * (t + 1) + i]
        expect = {"v_hi": vsq[t, i] - ls.v_hi[i] ** 2, "v_lo": ls.v_lo[i] ** 2 - vsq[t, i],
                  "x_hi": x_next - ls.b[i], "x_lo": -x_next, "p_hi": pS - ls.p_hi[i],
                  "p_lo": ls.p_lo[i] - pS, "q_hi": qI - ls.q_bar[i, t], "q_lo": -qI - ls.q_bar[i, t]}[fam]
        assert rows[r] == pytest.approx(expect, abs=1e-9)


def test_composed_rows_match_triple():
    sc = desk_feeder()
    ls = assemble(sc)
    rng = np.random.default_rng(4)
    Q = rng.normal(0, 0.05, (ls.N_u, ls.N_xi)) * ls.S_mask
    xi = sample_batch(sc.disturbance, 1, seed=0)[0]
    for variant in ("inner", "outer"):
        G, H0 = ls.composed(variant)
        F = ls.F_in if variant == "inner" else ls.F_out
        u = Q @ xi
        direct = F.Fx @ (ls.A @ ls.x0 + ls.Bb @ u) + F.Fu @ u + F.Fxi @ xi
        np.testing.assert_allclose((G @ Q + H0.toarray()) @ xi, direct, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(-3.0, 3.0), st.floats(0.5, 3.0), st.floats(0.0, 1.0))
def test_inner_true_outer_nesting(xi_pv, q, s, peak_frac):
    # peak PV on the support bounds the realized value
    peak = peak_frac * s
    xi_pv = min(xi_pv, peak)
    q_bar = np.sqrt(s**2 - peak**2)
    inner = abs(q) <= q_bar
    true = q**2 + xi_pv**2 <= s**2
    outer = abs(q) + xi_pv <= np.sqrt(2) * s
    if inner:
        assert true
    if true:
        assert outer


def test_nesting_on_assembled_rows():
    sc = desk_feeder(theta=2.0)
    ls = assemble(sc)
    n, T, per = ls.n, ls.T, ls.n * ls.T
    rng = np.random.default_rng(7)
    X = sample_batch(sc.disturbance, 1000, seed=9)
    U = rng.uniform(-3, 3, (1000, ls.N_u))
    q_rows = slice(6 * per, 8 * per)
    for xi, u in zip(X, U):
        ri = (ls.F_in.Fu @ u + ls.F_in.Fxi @ xi)[q_rows]
        ro = (ls.F_out.Fu @ u + ls.F_out.Fxi @ xi)[q_rows]
        qI = u[1::2].reshape(T, n)
        pv = xi[1:].reshape(T, n, 3)[:, :, PV]
        true = qI**2 + pv**2 <= ls.s[None, :] ** 2
        active = ls.s[None, :] > 0
        inner_ok = (ri.reshape(2, T, n) <= 0).all(axis=0)
        outer_ok = (ro.reshape(2, T, n) <= 0).all(axis=0)
        assert np.all(~inner_ok | true | ~active)
        assert np.all(~true | outer_ok)


def test_policy_mask_count_and_causality():
    n, T = 3, 5
    mask = build_policy_mask(n, T)
    assert mask.sum() == 2 * n * (T + 3 * T * (T + 1) // 2)
    for r in range(2 * n * T):
        t, rem = divmod(r, 2 * n)
        i = rem // 2
        for col in np.flatnonzero(mask[r])[1:]:
            s, k = divmod(col - 1, 3 * n)
            assert s <= t and k // 3 == i


def test_lifting_structure():
    n, T, delta = 2, 3, 0.5
    B = build_step_input_map(n, delta)
    A, Bb, c = build_lifting(n, T, B)
    assert Bb[:n].sum() == 0
    u = np.arange(2 * n * T, dtype=float)
    x = A @ np.ones(n) + Bb @ u
    x_ref = np.ones(n)
    for t in range(T):
        x_ref = x_ref - delta * u[2 * n * t:2 * n * (t + 1):2]
        np.testing.assert_allclose(x[n * (t + 1):n * (t + 2)], x_ref)
    assert c @ x == pytest.approx(x_ref.sum())


def test_row_info_and_families():
    ls = assemble(desk_feeder())
    per = ls.n * ls.T
    assert ls.row_info(0) == ("v_hi", 1, 0)
    assert ls.row_info(per + ls.n + 2) == ("v_lo", 3, 1)
    assert ls.row_info(ls.m - 1) == ("q_lo", ls.n, ls.T - 1)
    assert len(FAMILIES) == 8


def test_box_to_polytope_membership():
    box = BoxSupport(np.array([0.0, -1.0]), np.array([1.0, 2.0]))
    W = box_to_polytope(box)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 3, (500, 2))
    xi = np.hstack([np.ones((500, 1)), pts])
    np.testing.assert_array_equal((xi @ W.T >= 0).all(axis=1), box.contains(xi))


def test_pv_above_inverter_rating_rejected():
    with pytest.raises(ScenarioError):
        assemble(desk_feeder(theta=2.0, s_factor=0.5))


def test_inactive_channels():
    ls = assemble(desk_feeder(theta=0.0))
    n = ls.n
    # buses 2 and 4 carry storage; no inverter has capacity at theta = 0
    assert ls.input_active[:2 * n].tolist() == [False, False, True, False, False, False, True, False]
