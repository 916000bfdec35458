import numpy as np
import pytest

from dercontrol.assembly import assemble, box_to_polytope
from dercontrol.cases import desk_feeder
from dercontrol.scenario import AssumptionViolation, DisturbanceModel, PointMass, PolytopeSupport
from dercontrol.simulate import (FastDisturbanceModel, estimate_cost_ci, fast_as_slow, fast_rollout, rollout,
                                 write_bands_csv, write_costs_csv, write_violations_csv)
from dercontrol.synthesis import AffinePolicy, synthesize_policy
from oracles import step_oracle


@pytest.fixture(scope="module")
def desk():
    sc = desk_feeder(theta=3.0)
    ls = assemble(sc)
    pol = synthesize_policy(ls, sc.disturbance)
    return sc, ls, pol


def test_rollout_matches_step_oracle(desk):
    sc, ls, pol = desk
    batch = rollout(pol, ls, sc.disturbance, 50, seed=2)
    for k in range(50):
        cost, vsq = step_oracle(sc, batch.u[k], batch.xi[k])
        assert batch.costs[k] == pytest.approx(cost, rel=1e-12)
        np.testing.assert_allclose(batch.v[k] ** 2, vsq, rtol=1e-12)
        np.testing.assert_allclose(batch.u[k], pol.Q @ batch.xi[k], atol=1e-15)
        pS = batch.u[k, 0::2].reshape(ls.T, ls.n)
        x_ref = ls.x0 - ls.delta * np.cumsum(pS, axis=0)
        np.testing.assert_allclose(batch.x[k, ls.n:].reshape(ls.T, ls.n), x_ref, atol=1e-12)


def test_policy_is_causal_and_local(desk):
    sc, ls, pol = desk
    rng = np.random.default_rng(0)
    n, T = ls.n, ls.T
    xi = sc.disturbance.mean.copy()
    base = pol.inputs(xi)
    for t in range(T):
        for i in range(n):
            bumped = xi.copy()
            future = slice(1 + 3 * n * (t + 1), None)
            bumped[future] += rng.normal(size=bumped[future].size)
            others = [1 + 3 * n * s + 3 * j + c for s in range(T) for j in range(n) if j != i for c in range(3)]
            bumped[others] += rng.normal(size=len(others))
            u = pol.inputs(bumped)
            sl = slice(2 * n * t + 2 * i, 2 * n * t + 2 * i + 2)
            assert np.array_equal(u[sl], base[sl])


def test_synthesized_policy_has_no_violations(desk):
    sc, ls, pol = desk
    batch = rollout(pol, ls, sc.disturbance, 5000, seed=1)
    assert batch.total_violations == 0
    assert not batch.sample_violated.any()


def test_violations_are_detected(desk):
    sc, ls, pol = desk
    Q = np.zeros_like(pol.Q)
    Q[2, 0] = ls.p_hi[1] + 0.1
    batch = rollout(Q, ls, sc.disturbance, 100, seed=1)
    assert batch.counts["p_hi"][1, 0] == 100
    assert batch.worst["p_hi"][1, 0] == pytest.approx(0.1)
    assert ("p_hi", 2, 0, 100, pytest.approx(0.1)) in batch.violation_records()


def test_point_mass_disturbances_give_zero_spread():
    sc = desk_feeder(theta=2.0)
    dm = sc.disturbance
    det = DisturbanceModel(dm.n, dm.T, tuple(PointMass(l.mean()) for l in dm.laws))
    ls = assemble(sc)
    batch = rollout(AffinePolicy.zero(ls), ls, det, 200, seed=0)
    assert np.ptp(batch.costs) == 0.0
    mean, hw = estimate_cost_ci(batch)
    assert hw == 0.0


def test_ci_shrinks_with_square_root_of_samples(desk):
    sc, ls, pol = desk
    _, h1 = estimate_cost_ci(rollout(pol, ls, sc.disturbance, 4000, seed=5))
    _, h4 = estimate_cost_ci(rollout(pol, ls, sc.disturbance, 16000, seed=5))
    assert h4 / h1 == pytest.approx(0.5, rel=0.1)
    with pytest.raises(ValueError):
        estimate_cost_ci(np.array([1.0]))


def test_rollout_independent_of_chunking(desk):
    sc, ls, pol = desk
    a = rollout(pol, ls, sc.disturbance, 3000, seed=9, chunk=4096)
    b = rollout(pol, ls, sc.disturbance, 3000, seed=9, chunk=1024)
    assert np.array_equal(a.costs, b.costs)


@pytest.mark.parametrize("law", ["slow", "uniform"])
def test_fast_with_one_subperiod_equals_slow(desk, law):
    sc, ls, pol = desk
    fdm = FastDisturbanceModel(sc.disturbance, 1, law=law)
    fast = fast_rollout(pol, ls, fdm, 1, 500, seed=4)
    slow = rollout(pol, ls, sc.disturbance, 500, seed=4)
    u, x, v = fast_as_slow(fast)
    # all desk laws are uniform on the box, so both laws reproduce the slow draws
    np.testing.assert_allclose(u, slow.u, atol=1e-10)
    np.testing.assert_allclose(x, slow.x, atol=1e-10)
    np.testing.assert_allclose(v, slow.v, atol=1e-10)
    np.testing.assert_allclose(fast.costs, slow.costs, atol=1e-10)


@pytest.mark.parametrize("K", [2, 4])
def test_fast_energy_bookkeeping_and_safety(desk, K):
    sc, ls, pol = desk
    fdm = FastDisturbanceModel(sc.disturbance, K)
    batch = fast_rollout(pol, ls, fdm, K, 2000, seed=3)
    assert batch.total_violations == 0
    pS = batch.u[..., 0::2]                         # (B, K, T, n)
    drop = batch.x[:, 0] - batch.x[:, K]            # (B, T, n)
    np.testing.assert_allclose(drop, ls.delta * pS.mean(axis=1), atol=1e-12)
    # each period starts where the previous one ended
    np.testing.assert_allclose(batch.x[:, 0, 1:], batch.x[:, K, :-1], atol=0)


def test_fast_inputs_constant_without_current_gain(desk):
    sc, ls, pol = desk
    n, T = ls.n, ls.T
    Q = pol.Q.copy()
    for t in range(T):
        Q[2 * n * t:2 * n * (t + 1), 1 + 3 * n * t:1 + 3 * n * (t + 1)] = 0.0
    fdm = FastDisturbanceModel(sc.disturbance, 4)
    batch = fast_rollout(Q, ls, fdm, 4, 100, seed=0)
    assert np.all(np.ptp(batch.u, axis=1) == 0.0)


def test_fast_assumption_checks(desk):
    sc, ls, pol = desk
    box = sc.disturbance.box()
    with pytest.raises(AssumptionViolation):
        FastDisturbanceModel(sc.disturbance, 2, upper=box.upper + 0.1)
    dm = sc.disturbance
    poly = DisturbanceModel(dm.n, dm.T, dm.laws, PolytopeSupport(box_to_polytope(box)))
    with pytest.raises(AssumptionViolation):
        FastDisturbanceModel(poly, 2)
    fdm = FastDisturbanceModel(sc.disturbance, 2)
    with pytest.raises(ValueError):
        fast_rollout(pol, ls, fdm, 3, 10, seed=0)


def test_csv_outputs_are_deterministic(desk, tmp_path):
    sc, ls, pol = desk
    outs = []
    for rep in range(2):
        batch = rollout(pol, ls, sc.disturbance, 1000, seed=7)
        d = tmp_path / str(rep)
        d.mkdir()
        write_costs_csv(batch, d / "costs.csv")
        write_violations_csv(batch, d / "violations.csv")
        write_bands_csv(batch, d / "bands.csv")
        outs.append([(d / f).read_bytes() for f in ("costs.csv", "violations.csv", "bands.csv")])
    assert outs[0] == outs[1]
    lines = outs[0][2].decode().splitlines()
    assert lines[0] == "quantity,bus,t,q05,q50,q95"
    # v, qI, pS over T periods plus x over T + 1 boundaries, per bus
    assert len(lines) - 1 == ls.n * (3 * ls.T + ls.T + 1)
    for row in lines[1:]:
        q05, q50, q95 = map(float, row.split(",")[3:])
        assert q05 <= q50 <= q95


def test_fast_bands_csv(desk, tmp_path):
    sc, ls, pol = desk
    batch = fast_rollout(pol, ls, FastDisturbanceModel(sc.disturbance, 2), 2, 200, seed=0)
    write_bands_csv(batch, tmp_path / "b.csv")
    assert len((tmp_path / "b.csv").read_text().splitlines()) - 1 == ls.n * (4 * ls.T + 1)
