import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dercontrol.network import NetworkModelError, RadialNetwork, build_rx, voltage_squared


def random_tree(rng, n):
    # each bus attaches to the substation or an earlier bus, then labels are shuffled
    order = rng.permutation(n) + 1
    parent = np.zeros(n, dtype=int)
    for k, lab in enumerate(order):
        parent[lab - 1] = 0 if k == 0 or rng.random() < 0.2 else order[rng.integers(k)]
    return parent


def brute_force_incidence(parent):
    """B[i, j] = 1 iff line j (feeding bus j) lies on the root path of bus i,
    found by enumerating all root-to-bus walks through an adjacency list."""
    n = len(parent)
    children = {k: [] for k in range(n + 1)}
    for child, p in enumerate(parent, start=1):
        children[int(p)].append(child)
    B = np.zeros((n, n))
    stack = [(0, [])]
    while stack:
        node, lines = stack.pop()
        if node:
            B[node - 1, lines] = 1.0
        for c in children[node]:
            stack.append((c, lines + [c - 1]))
    return B


def test_two_bus_path():
    sm = build_rx(RadialNetwork.path(2))
    np.testing.assert_allclose(sm.R, [[0.932, 0.932], [0.932, 1.864]], atol=1e-12)


def test_single_bus():
    net = RadialNetwork([0], [1.0], [0.5], 12.0, [11.0], [13.0])
    sm = build_rx(net)
    assert sm.R.tolist() == [[2.0]]
    assert sm.X.tolist() == [[1.0]]


def test_star_has_zero_cross_terms():
    net = RadialNetwork([0, 0], [0.3, 0.7], [0.1, 0.2], 12.0, 11.0, 13.0)
    sm = build_rx(net)
    assert sm.R[0, 1] == 0.0 and sm.R[1, 0] == 0.0
    assert sm.subtree == ((0,), (1,))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_rx_matches_path_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    parent = random_tree(rng, n)
    r = rng.uniform(0.1, 1.0, n)
    x = rng.uniform(0.1, 1.0, n)
    net = RadialNetwork(parent, r, x, 12.0, 11.0, 13.0)
    sm = build_rx(net)
    B = brute_force_incidence(parent)
    np.testing.assert_allclose(sm.R, 2 * B @ np.diag(r) @ B.T, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sm.X, 2 * B @ np.diag(x) @ B.T, rtol=0, atol=1e-12)
    assert np.array_equal(sm.R, sm.R.T)
    d = np.diag(sm.R)
    assert np.all(sm.R <= np.minimum.outer(d, d) + 1e-12)
    np.testing.assert_allclose(d, 2 * B @ r, atol=1e-12)


@pytest.mark.parametrize("parent", [[2, 1], [0, 3, 2], [0, 5]])
def test_invalid_trees_rejected(parent):
    n = len(parent)
    with pytest.raises(NetworkModelError):
        RadialNetwork(parent, np.ones(n), np.ones(n), 12.0, 11.0, 13.0)


def test_bad_parameters_rejected():
    with pytest.raises(NetworkModelError):
        RadialNetwork([0], [0.0], [1.0], 12.0, 11.0, 13.0)
    with pytest.raises(NetworkModelError):
        RadialNetwork([0], [1.0], [1.0], 12.0, 12.5, 13.0)


def test_voltage_squared():
    net = RadialNetwork.path(3)
    sm = build_rx(net)
    p = np.array([0.1, -0.2, 0.3])
    q = np.array([0.05, 0.0, -0.1])
    v2 = voltage_squared(net, sm, p, q)
    np.testing.assert_allclose(v2, sm.R @ p + sm.X @ q + 144.0)
    batch = voltage_squared(net, sm, np.stack([p, 2 * p]), np.stack([q, 2 * q]))
    assert batch.shape == (2, 3)
    with pytest.raises(ValueError):
        voltage_squared(net, sm, p[:2], q)


def test_per_unit_constructor():
    net = RadialNetwork.from_per_unit([0, 1], [0.466, 0.466], [0.733, 0.733], 12.0)
    assert net.v0 == 12.0
    np.testing.assert_allclose(net.v_lo, 11.4)
    np.testing.assert_allclose(net.v_hi_sq, 12.6**2)
