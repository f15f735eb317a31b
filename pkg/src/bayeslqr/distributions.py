"""Gaussian laws over system parameters ``S = [A B]`` and sample-size bounds.

Vectorization is column-major throughout: ``vec(S) = S.flatten(order="F")``,
so entry ``S[i, j]`` sits at position ``i + j * d_x``. For a matrix-normal
law with row covariance ``U`` (d_x x d_x) and column covariance ``V``
((d_x+d_u) x (d_x+d_u)) this gives ``cov(vec(S)) = kron(V, U)``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

__all__ = [
    "GaussianParameterLaw",
    "TruncatedLaw",
    "RiskProfile",
    "chi2_quantile",
    "sample",
    "mahalanobis_sq",
    "sample_truncated",
    "sample_wishart",
    "scenario_sample_bound",
    "hoeffding_sample_bound",
    "n_k_for",
    "vec",
    "unvec",
]

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-10
KRON_TOL = 1e-8
# eigenvalues below this fraction of the largest are treated as zero
PINV_CUTOFF = 1e-12


def vec(s: np.ndarray) -> np.ndarray:
    """Column-major vectorization; batches of matrices keep their leading axis."""
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        return s.flatten(order="F")
    return np.swapaxes(s, -1, -2).reshape(s.shape[0], -1)


def unvec(v: np.ndarray, d_x: int) -> np.ndarray:
    """Inverse of :func:`vec` for ``d_x`` rows."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return v.reshape((d_x, -1), order="F")
    return np.swapaxes(v.reshape(v.shape[0], -1, d_x), -1, -2)


@dataclass(frozen=True, eq=False)
class GaussianParameterLaw:
    """Normal law over ``vec([A B])`` with an optional Kronecker structure.

    Parameters
    ----------
    mean : ndarray, shape (d_x, d_x + d_u)
        Mean parameter matrix ``[A B]``.
    covariance : ndarray, shape (d_s, d_s)
        Covariance of the column-major ``vec`` of the parameter matrix.
    kron_row_cov, kron_col_cov : ndarray, optional
        Matrix-normal factors with ``covariance == kron(kron_col_cov, kron_row_cov)``.
    """

    mean: np.ndarray
    covariance: np.ndarray
    kron_row_cov: np.ndarray | None = None
    kron_col_cov: np.ndarray | None = None

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float, ndmin=2)
        d_x, n_cols = mean.shape
        if n_cols <= d_x:
            raise ValueError(f"mean must be d_x x (d_x + d_u) with d_u >= 1, got {mean.shape}")
        d_s = d_x * n_cols
        cov = np.array(self.covariance, dtype=float, ndmin=2)
        if cov.shape != (d_s, d_s):
            raise ValueError(f"covariance must be {d_s}x{d_s}, got {cov.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("law parameters must be finite")
        scale = max(np.max(np.abs(cov), initial=0.0), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * scale:
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        for name, expected in (("kron_row_cov", d_x), ("kron_col_cov", n_cols)):
            fac = getattr(self, name)
            if fac is not None:
                fac = np.array(fac, dtype=float, ndmin=2)
                if fac.shape != (expected, expected):
                    raise ValueError(f"{name} must be {expected}x{expected}")
                fac.setflags(write=False)
                object.__setattr__(self, name, fac)
        if (self.kron_row_cov is None) != (self.kron_col_cov is None):
            raise ValueError("Kronecker factors must be given together")
        if self.kron_row_cov is not None:
            kron = np.kron(self.kron_col_cov, self.kron_row_cov)
            denom = max(np.linalg.norm(cov), np.finfo(float).tiny)
            if np.linalg.norm(kron - cov) > KRON_TOL * denom:
                raise ValueError("Kronecker factors do not reproduce the covariance")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        # raises for indefinite covariances
        _ = self._factor

    @classmethod
    def from_kronecker(cls, mean, row_cov, col_cov) -> "GaussianParameterLaw":
        row_cov = np.asarray(row_cov, dtype=float)
        col_cov = np.asarray(col_cov, dtype=float)
        return cls(mean, np.kron(col_cov, row_cov), row_cov, col_cov)

    @classmethod
    def degenerate(cls, a, b) -> "GaussianParameterLaw":
        """Point mass at ``[a b]``."""
        mean = np.hstack([np.atleast_2d(a), np.atleast_2d(b)])
        return cls(mean, np.zeros((mean.size, mean.size)))

    @property
    def d_x(self) -> int:
        return self.mean.shape[0]

    @property
    def d_u(self) -> int:
        return self.mean.shape[1] - self.mean.shape[0]

    @property
    def d_s(self) -> int:
        return self.mean.size

    @cached_property
    def _factor(self) -> tuple[np.ndarray, np.ndarray]:
        vals, vecs = np.linalg.eigh(self.covariance)
        tr = np.trace(self.covariance)
        if vals.size and vals[0] < -PSD_TOL * max(tr, 0.0):
            raise np.linalg.LinAlgError(
                f"covariance is indefinite (min eigenvalue {vals[0]:.3e}, trace {tr:.3e})"
            )
        return np.clip(vals, 0.0, None), vecs

    @cached_property
    def _sqrt_cov(self) -> np.ndarray:
        vals, vecs = self._factor
        return vecs * np.sqrt(vals)

    @cached_property
    def _whitener(self) -> np.ndarray:
        # rows map a centred vec onto whitened coordinates of the kept eigendirections
        vals, vecs = self._factor
        top = vals[-1] if vals.size else 0.0
        keep = vals > PINV_CUTOFF * top if top > 0 else np.zeros(vals.shape, bool)
        return (vecs[:, keep] / np.sqrt(vals[keep])).T

    def mahalanobis_sq(self, s) -> np.ndarray | float:
        s = np.asarray(s, dtype=float)
        if s.shape[-2:] != self.mean.shape:
            raise ValueError(f"expected parameter matrices of shape {self.mean.shape}, got {s.shape}")
        z = (vec(s) - vec(self.mean)) @ self._whitener.T
        out = np.sum(z * z, axis=-1)
        return float(out) if s.ndim == 2 else out

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        n = 1 if size is None else int(size)
        z = rng.standard_normal((n, self.d_s))
        draws = unvec(vec(self.mean) + z @ self._sqrt_cov.T, self.d_x)
        return draws[0] if size is None else draws

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean).tobytes())
        h.update(np.ascontiguousarray(self.covariance).tobytes())
        return h.hexdigest()[:16]

    def to_dict(self, credibility: float | None = None) -> dict:
        out = {
            "d_x": self.d_x,
            "d_u": self.d_u,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
        }
        if credibility is not None:
            out["credibility"] = float(credibility)
        if self.kron_row_cov is not None:
            out["kron_row_cov"] = self.kron_row_cov.tolist()
            out["kron_col_cov"] = self.kron_col_cov.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianParameterLaw":
        d_x, d_u = int(doc["d_x"]), int(doc["d_u"])
        mean = np.array(doc["mean"], dtype=float, ndmin=2)
        if mean.shape != (d_x, d_x + d_u):
            raise ValueError(f"mean has shape {mean.shape}, expected {(d_x, d_x + d_u)}")
        return cls(mean, np.array(doc["covariance"], dtype=float, ndmin=2),
                   doc.get("kron_row_cov"), doc.get("kron_col_cov"))


@dataclass(frozen=True, eq=False)
class TruncatedLaw:
    """A Gaussian law restricted to its ``credibility`` Mahalanobis ellipsoid."""

    base: GaussianParameterLaw
    credibility: float
    radius_sq: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.credibility < 1.0:
            raise ValueError("credibility must lie in (0, 1)")
        object.__setattr__(self, "radius_sq", chi2_quantile(self.base.d_s, self.credibility))

    def contains(self, s) -> np.ndarray | bool:
        m = self.base.mahalanobis_sq(s)
        return m <= self.radius_sq

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        return sample_truncated(self, rng, size)


@dataclass(frozen=True)
class RiskProfile:
    """Credibility, risk and confidence levels ``(c, eps, beta, eps_val, alpha)``."""

    c: float
    eps: float
    beta: float
    eps_val: float
    alpha: float

    def __post_init__(self):
        for name in ("c", "eps", "beta", "eps_val", "alpha"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.eps + self.eps_val >= self.c:
            raise ValueError("eps + eps_val must be smaller than c")

    @property
    def guaranteed_stability_prob(self) -> float:
        return self.c - self.eps - self.eps_val

    def as_dict(self) -> dict:
        return {"c": self.c, "eps": self.eps, "beta": self.beta,
                "eps_val": self.eps_val, "alpha": self.alpha}


def chi2_quantile(dof: int, p: float) -> float:
    """Quantile of the chi-squared distribution with ``dof`` degrees of freedom."""
    if int(dof) != dof or dof < 1:
        raise ValueError("dof must be a positive integer")
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    if p == 0.0:
        return 0.0
    return float(2.0 * special.gammaincinv(0.5 * dof, p))


def sample(law: GaussianParameterLaw, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    return law.sample(rng, size)


def mahalanobis_sq(law: GaussianParameterLaw, s) -> float:
    return law.mahalanobis_sq(s)


def sample_truncated(tlaw: TruncatedLaw, rng: np.random.Generator, size: int | None = None,
                     return_proposals: bool = False):
    """Rejection sampler for the truncated law.

    With ``return_proposals`` the number of raw proposals is returned as a
    second value (acceptance rate = accepted / proposals).
    """
    n = 1 if size is None else int(size)
    base = tlaw.base
    accepted: list[np.ndarray] = []
    have = proposals = 0
    while have < n:
        need = n - have
        batch = int(math.ceil(need / tlaw.credibility * 1.05)) + 8
        draws = base.sample(rng, batch)
        idx = np.flatnonzero(base.mahalanobis_sq(draws) <= tlaw.radius_sq)[:need]
        # proposals are counted up to the last one accepted
        proposals += int(idx[-1]) + 1 if idx.size == need else batch
        accepted.append(draws[idx])
        have += idx.size
    out = np.concatenate(accepted)[:n]
    if size is None:
        out = out[0]
    return (out, proposals) if return_proposals else out


def sample_wishart(scale, dof: int, rng: np.random.Generator) -> np.ndarray:
    """Wishart draw via the Bartlett decomposition."""
    scale = np.array(scale, dtype=float, ndmin=2)
    d = scale.shape[0]
    if scale.shape != (d, d) or np.max(np.abs(scale - scale.T), initial=0.0) > SYMMETRY_TOL * max(
        np.max(np.abs(scale)), 1e-300
    ):
        raise ValueError("scale must be a symmetric square matrix")
    if int(dof) != dof or dof < d:
        raise ValueError(f"dof must be an integer >= {d}")
    vals, vecs = np.linalg.eigh(0.5 * (scale + scale.T))
    if vals[0] < -PSD_TOL * max(np.trace(scale), 0.0):
        raise ValueError("scale must be positive semidefinite")
    try:
        root = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError:
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    bart = np.zeros((d, d))
    bart[np.diag_indices(d)] = np.sqrt(rng.chisquare(dof - np.arange(d)))
    lower = np.tril_indices(d, -1)
    bart[lower] = rng.standard_normal(len(lower[0]))
    la = root @ bart
    w = la @ la.T
    return 0.5 * (w + w.T)


def _check_unit(name: str, v: float):
    if not 0.0 < v < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {v}")


def scenario_sample_bound(eps: float, beta: float, n_k: int) -> int:
    """Scenario count ``ceil(2/eps * ln(1/beta) + n_k)`` for the initial LMI."""
    _check_unit("eps", eps)
    _check_unit("beta", beta)
    if int(n_k) != n_k or n_k < 1:
        raise ValueError("n_k must be a positive integer")
    return int(math.ceil(2.0 / eps * math.log(1.0 / beta) + n_k))


def hoeffding_sample_bound(eps_val: float, alpha: float) -> int:
    """Validation sample count ``ceil(ln(1/alpha) / (2 eps_val^2))``, at least 1."""
    _check_unit("eps_val", eps_val)
    _check_unit("alpha", alpha)
    return max(1, int(math.ceil(math.log(1.0 / alpha) / (2.0 * eps_val**2))))


def n_k_for(d_x: int, d_u: int) -> int:
    """Number of decision variables counted for the initial scenario program."""
    return 2 * d_x * d_x + d_x * d_u
