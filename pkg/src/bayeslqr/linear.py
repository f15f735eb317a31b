"""Linear systems, Riccati/Stein solvers and LQR cost evaluators.

Gains are plain ``(d_u, d_x)`` arrays applied as ``u = K x``. Both cost
evaluators return per-step (time-averaged) costs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinearSystem",
    "CostWeights",
    "NotStabilizableError",
    "spectral_radius",
    "spectral_radii",
    "is_stable",
    "dare_solve",
    "dlyap_solve",
    "lyapunov_cost",
    "finite_horizon_expected_cost",
    "finite_horizon_costs",
    "COST_CEILING",
]

COST_CEILING = 1e300
DARE_MAX_ITER = 10_000
DARE_RESIDUAL_TOL = 1e-10


class NotStabilizableError(ArithmeticError):
    """The Riccati iteration did not produce a stabilizing solution."""


@dataclass(frozen=True, eq=False)
class LinearSystem:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float, ndmin=2)
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"A must be square, got {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise ValueError(f"B must have {a.shape[0]} rows, got {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("system matrices must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_parameters(cls, s: np.ndarray) -> "LinearSystem":
        s = np.atleast_2d(s)
        d_x = s.shape[0]
        return cls(s[:, :d_x], s[:, d_x:])

    @property
    def d_x(self) -> int:
        return self.a.shape[0]

    @property
    def d_u(self) -> int:
        return self.b.shape[1]

    @property
    def parameters(self) -> np.ndarray:
        return np.hstack([self.a, self.b])

    def closed_loop(self, k: np.ndarray) -> np.ndarray:
        return self.a + self.b @ np.atleast_2d(k)


@dataclass(frozen=True, eq=False)
class CostWeights:
    """State weight ``q``, input weight ``r`` and process-noise covariance ``sigma_w``."""

    q: np.ndarray
    r: np.ndarray
    sigma_w: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float, ndmin=2)
        r = np.array(self.r, dtype=float, ndmin=2)
        sw = np.array(self.sigma_w, dtype=float, ndmin=2)
        for name, m in (("q", q), ("r", r), ("sigma_w", sw)):
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
                raise ValueError(f"{name} must be symmetric")
        if q.shape != sw.shape:
            raise ValueError("q and sigma_w must have the same shape")
        if np.linalg.eigvalsh(q)[0] < -1e-12 * max(1.0, np.trace(q)):
            raise ValueError("q must be positive semidefinite")
        if np.linalg.eigvalsh(r)[0] <= 1e-12:
            raise ValueError("r must be positive definite")
        if np.any(sw != np.diag(np.diag(sw))) or np.any(np.diag(sw) < 0):
            raise ValueError("sigma_w must be diagonal and nonnegative")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "sigma_w", sw)

    def stage(self, k: np.ndarray) -> np.ndarray:
        """Closed-loop stage weight ``Q + K' R K``."""
        k = np.atleast_2d(k)
        return self.q + k.T @ self.r @ k


def spectral_radius(m) -> float:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def spectral_radii(batch: np.ndarray) -> np.ndarray:
    """Spectral radii of a stack of square matrices ``(n, d, d)``."""
    return np.max(np.abs(np.linalg.eigvals(batch)), axis=-1)


def is_stable(sys: LinearSystem, k) -> bool:
    return spectral_radius(sys.closed_loop(k)) < 1.0


def _riccati_map(a, b, q, r, p):
    bp = b.T @ p
    return q + a.T @ p @ a - (bp @ a).T @ np.linalg.solve(r + bp @ b, bp @ a)


def dare_solve(sys: LinearSystem, weights: CostWeights) -> tuple[np.ndarray, np.ndarray]:
    """Stabilizing DARE solution and certainty-equivalent gain.

    Uses the structure-preserving doubling iteration; ``(Q, A)`` must be
    detectable. Raises :class:`NotStabilizableError` if the iteration
    diverges or the resulting closed loop is not stable.
    """
    a, b, q, r = sys.a, sys.b, weights.q, weights.r
    n = sys.d_x
    ak = a.copy()
    gk = b @ np.linalg.solve(r, b.T)
    hk = q.copy()
    eye = np.eye(n)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(DARE_MAX_ITER):
            w = eye + gk @ hk
            try:
                wa = np.linalg.solve(w, ak)
                wg = np.linalg.solve(w, gk)
            except np.linalg.LinAlgError as exc:
                raise NotStabilizableError("doubling iteration became singular") from exc
            h_next = hk + ak.T @ hk @ wa
            g_next = gk + ak @ wg @ ak.T
            h_next = 0.5 * h_next + 0.5 * h_next.T
            ak = ak @ wa
            if not (np.all(np.isfinite(h_next)) and np.all(np.isfinite(ak))
                    and np.isfinite(np.linalg.norm(h_next))):
                raise NotStabilizableError("doubling iteration diverged")
            delta = np.linalg.norm(h_next - hk)
            hk, gk = h_next, 0.5 * g_next + 0.5 * g_next.T
            if delta <= 1e-15 * max(np.linalg.norm(hk), 1e-300):
                break
        else:
            raise NotStabilizableError(f"no convergence in {DARE_MAX_ITER} iterations")
    p = hk
    # a couple of fixed-point sweeps remove residual roundoff
    for _ in range(2):
        p = _riccati_map(a, b, q, r, p)
        p = 0.5 * (p + p.T)
    resid = np.linalg.norm(_riccati_map(a, b, q, r, p) - p)
    if resid > DARE_RESIDUAL_TOL * max(np.linalg.norm(p), 1e-300) and resid > 1e-300:
        raise NotStabilizableError(f"Riccati residual {resid:.2e} too large")
    bp = b.T @ p
    # adding 0.0 turns negative zeros (from A = 0) into plain zeros
    k = -np.linalg.solve(r + bp @ b, bp @ a) + 0.0
    if spectral_radius(a + b @ k) >= 1.0:
        raise NotStabilizableError("Riccati solution is not stabilizing")
    return p, k


def dlyap_solve(a_cl, w) -> np.ndarray:
    """Solve ``P = W + A' P A`` for stable ``A`` by squaring iteration."""
    a_cl = np.atleast_2d(np.asarray(a_cl, dtype=float))
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if spectral_radius(a_cl) >= 1.0:
        raise ValueError("dlyap_solve needs a Schur-stable matrix")
    p = w.copy()
    m = a_cl.copy()
    for _ in range(200):
        if np.linalg.norm(m) < 1e-15:
            break
        p = p + m.T @ p @ m
        m = m @ m
    return 0.5 * (p + p.T)


def lyapunov_cost(sys: LinearSystem, k, weights: CostWeights) -> float:
    """Stationary per-step expected cost ``tr(P Sigma_w)``; ``inf`` if unstable."""
    k = np.atleast_2d(k)
    a_cl = sys.closed_loop(k)
    if spectral_radius(a_cl) >= 1.0:
        return float("inf")
    p = dlyap_solve(a_cl, weights.stage(k))
    return float(np.trace(p @ weights.sigma_w))


def finite_horizon_costs(a_cl: np.ndarray, stage: np.ndarray, sigma_w: np.ndarray, x0, t: int) -> np.ndarray:
    """Exact time-averaged expected cost for a stack of closed loops ``(n, d, d)``.

    ``(1/t) * sum_{k<t} tr(stage @ Sigma_k)`` with ``Sigma_0 = x0 x0'`` and
    ``Sigma_{k+1} = A Sigma_k A' + sigma_w``, saturated at :data:`COST_CEILING`.
    """
    if t < 1:
        raise ValueError("horizon must be at least 1")
    a_cl = np.asarray(a_cl, dtype=float)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = a_cl.shape[0]
    cov = np.broadcast_to(np.outer(x0, x0), a_cl.shape).copy()
    total = np.zeros(n)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(t):
            total += np.einsum("ij,nji->n", stage, cov)
            cov = a_cl @ cov @ np.swapaxes(a_cl, -1, -2) + sigma_w
    out = total / t
    return np.where(np.isfinite(out) & (out < COST_CEILING), out, COST_CEILING)


def finite_horizon_expected_cost(sys: LinearSystem, k, weights: CostWeights, x0, t: int) -> float:
    k = np.atleast_2d(k)
    a_cl = sys.closed_loop(k)[None]
    return float(finite_horizon_costs(a_cl, weights.stage(k), weights.sigma_w, x0, t)[0])
