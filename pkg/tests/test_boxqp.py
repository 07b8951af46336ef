import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import lsq_linear

from fppeboot.boxqp import solve_box_qp


def random_pd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(np.geomspace(1.0, cond, n)) @ Q.T


def reference(H, g, lo, hi):
    # 1/2 x'Hx + g'x = 1/2 |L'x + L^-1 g|^2 + const
    L = np.linalg.cholesky(H)
    rhs = -np.linalg.solve(L, g)
    return lsq_linear(L.T, rhs, bounds=(lo, hi), tol=1e-14, method="bvls").x


def objective(H, g, x):
    return 0.5 * x @ H @ x + g @ x


def test_interior_is_newton_point():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    g = np.array([0.3, -0.2])
    x = solve_box_qp(H, g, np.full(2, -10.0), np.full(2, 10.0))
    np.testing.assert_allclose(x, -np.linalg.solve(H, g), atol=1e-14)


def test_identity_clips():
    x = solve_box_qp(np.eye(3), np.array([2.0, -2.0, 0.5]), np.full(3, -1.0), np.full(3, 1.0))
    np.testing.assert_allclose(x, [-1.0, 1.0, -0.5])


def test_equal_bounds_fix_coordinate():
    H = np.array([[2.0, 1.0], [1.0, 2.0]])
    x = solve_box_qp(H, np.array([0.0, -1.0]), np.array([0.3, -5.0]), np.array([0.3, 5.0]))
    assert x[0] == 0.3
    assert x[1] == pytest.approx((1.0 - 0.3) / 2.0, abs=1e-14)


def test_infinite_bounds():
    H = np.eye(2)
    x = solve_box_qp(H, np.array([1.0, -1.0]), np.array([0.0, -np.inf]), np.array([np.inf, np.inf]))
    np.testing.assert_allclose(x, [0.0, 1.0])


def test_ill_conditioned():
    rng = np.random.default_rng(1)
    H = random_pd(rng, 6, cond=1e9)
    g = rng.normal(size=6)
    lo, hi = np.full(6, -np.inf), np.full(6, np.inf)
    x = solve_box_qp(H, g, lo, hi)
    assert objective(H, g, x) <= objective(H, g, np.linalg.solve(H, -g)) + 1e-9


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8))
def test_matches_bounded_least_squares(seed, n):
    rng = np.random.default_rng(seed)
    H = random_pd(rng, n, cond=rng.uniform(1, 1e3))
    g = rng.normal(size=n) * 3
    lo = -rng.uniform(0, 1, n)
    hi = rng.uniform(0, 1, n)
    x = solve_box_qp(H, g, lo, hi)
    assert np.all(x >= lo) and np.all(x <= hi)
    ref = reference(H, g, lo, hi)
    assert objective(H, g, x) <= objective(H, g, ref) + 1e-10 * (1 + abs(objective(H, g, ref)))
    np.testing.assert_allclose(x, ref, atol=1e-6)
