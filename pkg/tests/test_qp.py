import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from dercontrol.qp import (INFEASIBLE, MAX_ITER, OPTIMAL, NonConvexError, QPProblem, QPSettings, check_convexity,
                           dump_qp, load_qp, solve_qp)
from oracles import active_set_oracle, random_convex_qp


def kkt_residuals(p, sol):
    r_d = p.H @ sol.z + p.g + p.A_eq.T @ sol.y + p.A_in.T @ sol.lam
    slack = p.b_in - p.A_in @ sol.z
    return dict(dual=np.abs(r_d).max(initial=0), eq=np.abs(p.A_eq @ sol.z - p.b_eq).max(initial=0),
                ineq=max(0.0, -slack.min(initial=0)), lam=max(0.0, -sol.lam.min(initial=0)),
                comp=np.abs(sol.lam * slack).max(initial=0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_active_set_oracle(seed):
    rng = np.random.default_rng(seed)
    data = random_convex_qp(rng)
    p = QPProblem(*data)
    sol = solve_qp(p)
    assert sol.status == OPTIMAL
    z_ref, v_ref = active_set_oracle(*data)
    assert sol.objective == pytest.approx(v_ref, abs=1e-8 * (1 + abs(v_ref)))
    np.testing.assert_allclose(sol.z, z_ref, atol=1e-6)
    res = kkt_residuals(p, sol)
    assert max(res.values()) <= 1e-8


def test_unconstrained_and_bound():
    H = np.diag([2.0, 4.0])
    g = np.array([-2.0, -4.0])
    sol = solve_qp(QPProblem(H, g))
    np.testing.assert_allclose(sol.z, [1.0, 1.0], atol=1e-10)
    sol = solve_qp(QPProblem(H, g, A_in=np.array([[1.0, 0.0]]), b_in=[0.5]))
    np.testing.assert_allclose(sol.z, [0.5, 1.0], atol=1e-8)
    assert sol.lam[0] == pytest.approx(1.0, abs=1e-7)


def test_infeasible_inequalities():
    p = QPProblem(np.eye(2), np.zeros(2), A_in=np.array([[1.0, 0.0], [-1.0, 0.0]]), b_in=[-1.0, -1.0])
    sol = solve_qp(p)
    assert sol.status == INFEASIBLE


def test_inconsistent_equalities_certificate():
    A = np.array([[1.0, 1.0], [2.0, 2.0]])
    b = np.array([1.0, 3.0])
    sol = solve_qp(QPProblem(np.eye(2), np.zeros(2), A_eq=A, b_eq=b))
    assert sol.status == INFEASIBLE
    y = sol.certificate
    # y is orthogonal to range(A) yet has positive inner product with b
    np.testing.assert_allclose(A.T @ y, 0, atol=1e-10)
    assert y @ b > 1e-6


def test_nonconvex_reports_direction():
    H = np.array([[1.0, 0.0, 0.0], [0.0, -2.0, 0.0], [0.0, 0.0, 3.0]])
    with pytest.raises(NonConvexError) as exc:
        solve_qp(QPProblem(H, np.zeros(3)))
    d = exc.value.direction
    assert d @ H @ d < 0
    assert exc.value.curvature == pytest.approx(-2.0)
    with pytest.raises(NonConvexError):
        check_convexity(sp.csr_matrix(H))


def test_psd_singular_hessian_is_accepted():
    # linear objective in the second coordinate, bounded by the constraints
    H = np.diag([1.0, 0.0])
    A = np.array([[0.0, 1.0], [0.0, -1.0]])
    sol = solve_qp(QPProblem(H, np.array([0.0, 1.0]), A_in=A, b_in=[1.0, 2.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z, [0.0, -2.0], atol=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_merit_is_monotone(seed):
    rng = np.random.default_rng(seed)
    p = QPProblem(*random_convex_qp(rng))
    h = solve_qp(p).merit_history
    for k in range(2, len(h)):
        assert h[k] <= h[k - 1] * (1 + 1e-12) + 1e-10 * h[0]


def test_dump_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    while True:
        data = random_convex_qp(rng)
        if data[2].shape[0] and data[4].shape[0]:
            break
    p = QPProblem(*data)
    dump_qp(p, tmp_path / "qp.txt")
    q = load_qp(tmp_path / "qp.txt")
    for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    empty = QPProblem(np.eye(2), [1.0, 2.0])
    dump_qp(empty, tmp_path / "e.txt")
    e = load_qp(tmp_path / "e.txt")
    assert e.A_in.shape == (0, 2) and e.b_eq.shape == (0,)


def test_sparse_and_dense_paths_agree():
    rng = np.random.default_rng(8)
    d = 40
    L = sp.random(d, d, density=0.1, random_state=1)
    H = (L @ L.T + 0.1 * sp.eye(d)).tocsr()
    g = rng.normal(size=d)
    A_in = sp.random(30, d, density=0.2, random_state=2).tocsr()
    b_in = rng.uniform(0.1, 1.0, 30)
    A_eq = sp.random(3, d, density=0.5, random_state=3).tocsr()
    b_eq = np.zeros(3)
    s_sol = solve_qp(QPProblem(H, g, A_eq, b_eq, A_in, b_in))
    d_sol = solve_qp(QPProblem(H.toarray(), g, A_eq.toarray(), b_eq, A_in.toarray(), b_in))
    assert s_sol.ok and d_sol.ok
    np.testing.assert_allclose(s_sol.z, d_sol.z, atol=1e-6)
    assert s_sol.objective == pytest.approx(d_sol.objective, abs=1e-8)


def test_problem_validation():
    with pytest.raises(ValueError):
        QPProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        QPProblem(np.eye(2), np.zeros(2), A_in=np.ones((1, 3)), b_in=[0.0])


def test_iteration_limit_reported():
    rng = np.random.default_rng(0)
    p = QPProblem(*random_convex_qp(rng, d_max=10, n_in_max=6))
    sol = solve_qp(p, QPSettings(max_iter=1))
    assert sol.status == MAX_ITER and not sol.ok
    assert sol.iterations == 1
