"""Stability tests, Riccati and Stein solvers, and LQR cost evaluators."""
import math

import numpy as np
import pytest
from scipy import linalg

from bayeslqr.benchmarks import dean_linear_system
from bayeslqr.linear import (
    COST_CEILING,
    CostWeights,
    LinearSystem,
    NotStabilizableError,
    dare_solve,
    dlyap_solve,
    finite_horizon_expected_cost,
    is_stable,
    lyapunov_cost,
    spectral_radius,
)


def _scalar(a, b, q=1.0, r=1.0, sw=1.0):
    return LinearSystem([[a]], [[b]]), CostWeights([[q]], [[r]], [[sw]])


def _random_stable(rng, d_x=3, d_u=2, rho=0.9):
    a = rng.standard_normal((d_x, d_x))
    a *= rng.uniform(0.1, rho) / spectral_radius(a)
    sys = LinearSystem(a, rng.standard_normal((d_x, d_u)))
    k = np.zeros((d_u, d_x))
    g = rng.standard_normal((d_x, d_x))
    weights = CostWeights(g @ g.T, np.eye(d_u), np.diag(rng.uniform(0.1, 1.0, d_x)))
    return sys, k, weights


# --- spectral radius and stability ------------------------------------------------

def test_spectral_radius_examples():
    assert spectral_radius(np.diag([0.5, -0.2])) == pytest.approx(0.5)
    rot = 0.9 * np.array([[0.0, -1.0], [1.0, 0.0]])
    assert spectral_radius(rot) == pytest.approx(0.9)
    sys, _ = dean_linear_system()
    assert spectral_radius(sys.a) == pytest.approx(1.01 + 0.02 * math.cos(math.pi / 4), abs=1e-12)


def test_is_stable_examples():
    assert is_stable(LinearSystem([[0.5]], [[0.0]]), [[123.0]])
    sys, _ = dean_linear_system()
    assert not is_stable(sys, np.zeros((3, 3)))
    assert is_stable(LinearSystem(np.eye(2), np.eye(2)), -0.5 * np.eye(2))


def test_is_stable_boundary_counts_unstable():
    assert not is_stable(LinearSystem([[1.0]], [[0.0]]), [[0.0]])


def test_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(np.eye(2), [[0.0]], np.eye(2))
    with pytest.raises(ValueError):
        CostWeights(np.eye(2), [[1.0]], [[1.0, 0.1], [0.1, 1.0]])
    with pytest.raises(ValueError):
        CostWeights(-np.eye(2), [[1.0]], np.eye(2))


# --- DARE --------------------------------------------------------------------------

def test_dare_golden_ratio():
    sys, w = _scalar(1.0, 1.0)
    p, k = dare_solve(sys, w)
    phi = (1 + math.sqrt(5)) / 2
    assert p[0, 0] == pytest.approx(phi, rel=1e-12)
    assert k[0, 0] == pytest.approx(1 - phi, rel=1e-12)


def test_dare_without_dynamics():
    sys = LinearSystem(np.zeros((2, 2)), np.array([[1.0], [2.0]]))
    w = CostWeights(np.diag([2.0, 3.0]), [[1.0]], np.eye(2))
    p, k = dare_solve(sys, w)
    np.testing.assert_allclose(p, w.q, atol=1e-14)
    np.testing.assert_array_equal(k, np.zeros((1, 2)))
    assert not np.any(np.signbit(k))


def test_dare_benchmark_residual_and_stability():
    sys, w = dean_linear_system()
    p, k = dare_solve(sys, w)
    bp = sys.b.T @ p
    riccati = w.q + sys.a.T @ p @ sys.a - (bp @ sys.a).T @ np.linalg.solve(w.r + bp @ sys.b, bp @ sys.a)
    assert np.linalg.norm(riccati - p) <= 1e-10 * np.linalg.norm(p)
    assert spectral_radius(sys.closed_loop(k)) < 1.0


@pytest.mark.parametrize("seed", range(10))
def test_dare_matches_schur_solver(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 2))
    g = rng.standard_normal((3, 3))
    w = CostWeights(g @ g.T + 0.1 * np.eye(3), np.diag([1.0, 2.0]), np.eye(3))
    p, k = dare_solve(LinearSystem(a, b), w)
    p_ref = linalg.solve_discrete_are(a, b, w.q, w.r)
    np.testing.assert_allclose(p, p_ref, rtol=1e-8, atol=1e-10)
    k_ref = -np.linalg.solve(w.r + b.T @ p_ref @ b, b.T @ p_ref @ a)
    np.testing.assert_allclose(k, k_ref, rtol=1e-7, atol=1e-10)


def test_dare_not_stabilizable():
    sys = LinearSystem(np.diag([2.0, 0.5]), np.array([[0.0], [1.0]]))
    w = CostWeights(np.eye(2), [[1.0]], np.eye(2))
    with pytest.raises(NotStabilizableError):
        dare_solve(sys, w)


# --- Stein equation ----------------------------------------------------------------

def test_dlyap_examples():
    w = np.array([[2.0, 0.3], [0.3, 1.0]])
    np.testing.assert_array_equal(dlyap_solve(np.zeros((2, 2)), w), w)
    assert dlyap_solve([[0.5]], [[1.0]])[0, 0] == pytest.approx(4 / 3, rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_dlyap_residual_and_scipy(seed):
    rng = np.random.default_rng(seed)
    sys, _, w = _random_stable(rng, rho=0.97)
    p = dlyap_solve(sys.a, w.q)
    assert np.linalg.norm(w.q + sys.a.T @ p @ sys.a - p) <= 1e-10 * np.linalg.norm(p)
    np.testing.assert_allclose(p, linalg.solve_discrete_lyapunov(sys.a.T, w.q), rtol=1e-8, atol=1e-12)
    assert np.linalg.eigvalsh(p)[0] >= -1e-12


def test_dlyap_rejects_unstable():
    with pytest.raises(ValueError):
        dlyap_solve([[1.1]], [[1.0]])


# --- cost evaluators -----------------------------------------------------------------

def test_lyapunov_cost_examples():
    sys, w = _scalar(0.5, 0.0)
    assert lyapunov_cost(sys, [[0.0]], w) == pytest.approx(4 / 3)
    sys, w = _scalar(0.5, 1.0, sw=0.0)
    assert lyapunov_cost(sys, [[0.2]], w) == 0.0


def test_lyapunov_cost_unstable_is_infinite():
    sys, w = _scalar(1.5, 1.0)
    assert lyapunov_cost(sys, [[0.0]], w) == math.inf
    assert lyapunov_cost(sys, [[-1.0]], w) < math.inf


def test_finite_horizon_examples():
    sigma2 = 0.01
    sys = LinearSystem(np.zeros((3, 3)), np.eye(3))
    w = CostWeights(np.eye(3), np.eye(3), sigma2 * np.eye(3))
    got = finite_horizon_expected_cost(sys, np.zeros((3, 3)), w, np.zeros(3), 200)
    assert got == pytest.approx(199 / 200 * 3 * sigma2, rel=1e-12)
    x_star = np.array([1.0, -2.0, 0.5])
    q = np.diag([1.0, 2.0, 3.0])
    w = CostWeights(q, np.eye(3), np.eye(3))
    got = finite_horizon_expected_cost(LinearSystem(np.eye(3), np.eye(3)), np.zeros((3, 3)), w, x_star, 1)
    assert got == pytest.approx(x_star @ q @ x_star)


def test_finite_horizon_saturates_for_unstable_loops():
    sys, w = _scalar(10.0, 0.0)
    assert finite_horizon_expected_cost(sys, [[0.0]], w, [1.0], 1000) == COST_CEILING


@pytest.mark.parametrize("seed", range(5))
def test_long_horizon_matches_stationary(seed):
    sys, k, w = _random_stable(np.random.default_rng(100 + seed))
    fh = finite_horizon_expected_cost(sys, k, w, np.zeros(3), 10_000)
    assert fh == pytest.approx(lyapunov_cost(sys, k, w), rel=0.01)


def test_finite_cost_iff_stable():
    rng = np.random.default_rng(4)
    for _ in range(20):
        sys = LinearSystem(rng.uniform(-1.5, 1.5, (2, 2)), np.eye(2))
        w = CostWeights(np.eye(2), np.eye(2), np.eye(2))
        k = np.zeros((2, 2))
        assert is_stable(sys, k) == math.isfinite(lyapunov_cost(sys, k, w))
