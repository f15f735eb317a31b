"""Gaussian-process regression of one-step transitions and its Jacobian law.

One independent zero-mean GP per output dimension shares a squared
exponential kernel. Differentiating the posterior at an operating point
``q* = (x*, u*)`` gives a Gaussian law over the Jacobian ``[A B]`` whose rows
are independent, so its covariance over ``vec([A B])`` is block diagonal
(interleaved under the column-major ``vec``).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .distributions import GaussianParameterLaw

__all__ = [
    "SeKernel",
    "TransitionDataset",
    "DatasetParseError",
    "GpNumericalError",
    "GpPosterior",
    "fit",
    "predict",
    "linearize",
    "process_noise_estimate",
]

JITTER = 1e-8
# tolerance for declaring row-covariance blocks proportional (Kronecker form)
PROPORTIONAL_RTOL = 1e-10
TARGET_MODES = ("successor", "delta")


class DatasetParseError(ValueError):
    """Malformed transition file; ``line`` is 1-based."""

    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class GpNumericalError(np.linalg.LinAlgError):
    """Gram matrix factorization failed even after the jitter retry."""


@dataclass(frozen=True, eq=False)
class SeKernel:
    """Squared exponential kernel ``sf2 * exp(-0.5 * sum_j (q_j - q'_j)^2 / l_j^2)``."""

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.array(self.lengthscales, dtype=float, ndmin=1)
        if ls.ndim != 1:
            raise ValueError("lengthscales must be a vector")
        if not (math.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError("signal_variance must be positive")
        if not np.all(np.isfinite(ls) & (ls > 0)):
            raise ValueError("lengthscales must be positive")
        ls.setflags(write=False)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "lengthscales", ls)

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def __call__(self, x1, x2) -> np.ndarray:
        """Cross-covariance matrix between the rows of ``x1`` and ``x2``."""
        z1 = np.atleast_2d(x1) / self.lengthscales
        z2 = np.atleast_2d(x2) / self.lengthscales
        sq = (np.sum(z1**2, axis=1)[:, None] + np.sum(z2**2, axis=1)[None, :] - 2.0 * z1 @ z2.T)
        return self.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))

    def grad(self, q, x) -> np.ndarray:
        """``d k(q, x_j) / d q`` stacked as a ``(dim, N)`` array."""
        q = np.asarray(q, dtype=float).reshape(-1)
        x = np.atleast_2d(x)
        diff = (q[None, :] - x) / self.lengthscales**2
        return (-diff * self(q[None, :], x).T).T

    def derivative_prior(self) -> np.ndarray:
        """Prior covariance of the gradient: ``d^2 k(q, q') / dq dq'`` at ``q = q'``."""
        return self.signal_variance * np.diag(1.0 / self.lengthscales**2)

    def to_dict(self) -> dict:
        return {"signal_variance": self.signal_variance, "lengthscales": self.lengthscales.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SeKernel":
        return cls(float(doc["signal_variance"]), np.asarray(doc["lengthscales"], dtype=float))


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Inputs ``q_k = (x_k, u_k)`` (rows) and successor states ``x_{k+1}``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        q = np.array(self.inputs, dtype=float)
        y = np.array(self.targets, dtype=float)
        if q.ndim != 2 or y.ndim != 2:
            raise ValueError("inputs and targets must be 2-D")
        if q.shape[0] != y.shape[0]:
            raise ValueError(f"row counts differ: {q.shape[0]} inputs vs {y.shape[0]} targets")
        if q.shape[1] <= y.shape[1]:
            raise ValueError("inputs must have d_x + d_u columns with d_u >= 1")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        q.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", q)
        object.__setattr__(self, "targets", y)

    @classmethod
    def empty(cls, d_x: int, d_u: int) -> "TransitionDataset":
        return cls(np.zeros((0, d_x + d_u)), np.zeros((0, d_x)))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_x(self) -> int:
        return self.targets.shape[1]

    @property
    def d_u(self) -> int:
        return self.inputs.shape[1] - self.targets.shape[1]

    def header(self) -> list[str]:
        return [f"q_{j + 1}" for j in range(self.inputs.shape[1])] + [f"y_{j + 1}" for j in range(self.d_x)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for q, y in zip(self.inputs, self.targets):
            writer.writerow([repr(float(v)) for v in np.concatenate([q, y])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TransitionDataset":
        """Parse the ``q_1..q_n, y_1..y_m`` CSV format; errors carry line numbers."""
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise DatasetParseError("empty file, expected a header row", 1)
        header = [h.strip() for h in rows[0]]
        n_q = _count_prefix(header, "q")
        n_y = _count_prefix(header[n_q:], "y")
        if n_q + n_y != len(header) or n_q == 0 or n_y == 0:
            raise DatasetParseError("header must read q_1..q_n,y_1..y_m", 1)
        if n_q <= n_y:
            raise DatasetParseError("need more q columns than y columns (d_u >= 1)", 1)
        data = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DatasetParseError(f"non-numeric field ({exc})", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetParseError("non-finite field", lineno)
            data.append(vals)
        arr = np.array(data, dtype=float).reshape(-1, len(header))
        return cls(arr[:, :n_q], arr[:, n_q:])

    def to_dict(self) -> dict:
        return {"inputs": self.inputs.tolist(), "targets": self.targets.tolist(),
                "d_x": self.d_x, "d_u": self.d_u}

    @classmethod
    def from_dict(cls, doc: dict) -> "TransitionDataset":
        d_x, d_u = int(doc["d_x"]), int(doc["d_u"])
        q = np.array(doc["inputs"], dtype=float).reshape(-1, d_x + d_u)
        y = np.array(doc["targets"], dtype=float).reshape(-1, d_x)
        return cls(q, y)

    @classmethod
    def load(cls, path) -> "TransitionDataset":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(exc.msg, exc.lineno) from None
            return cls.from_dict(doc)
        return cls.from_csv(text)


def _count_prefix(header: list[str], prefix: str) -> int:
    n = 0
    while n < len(header) and header[n] == f"{prefix}_{n + 1}":
        n += 1
    return n


class GpPosterior:
    """Fitted per-output GPs; immutable after construction.

    Parameters
    ----------
    dataset : TransitionDataset
    kernel : SeKernel
        Shared by all outputs; its dimension must equal ``d_x + d_u``.
    noise_variances : array_like, shape (d_x,)
        Observation noise per output, also the process-noise estimate.
    target : {"successor", "delta"}
        Regress ``x_{k+1}`` directly or the increment ``x_{k+1} - x_k``.
        Predictions and Jacobians always refer to the successor state.
    """

    def __init__(self, dataset: TransitionDataset, kernel: SeKernel, noise_variances, target: str = "successor"):
        noise = np.array(noise_variances, dtype=float, ndmin=1)
        if noise.shape != (dataset.d_x,):
            raise ValueError(f"need {dataset.d_x} noise variances, got {noise.shape}")
        if not np.all(np.isfinite(noise) & (noise > 0)):
            raise ValueError("noise variances must be positive")
        if kernel.dim != dataset.inputs.shape[1]:
            raise ValueError(f"kernel has {kernel.dim} lengthscales, inputs have {dataset.inputs.shape[1]} columns")
        if target not in TARGET_MODES:
            raise ValueError(f"target must be one of {TARGET_MODES}")
        noise.setflags(write=False)
        self.dataset = dataset
        self.kernel = kernel
        self.noise_variances = noise
        self.target = target
        self.jittered = False
        x = dataset.inputs
        y = dataset.targets - (x[:, :dataset.d_x] if target == "delta" else 0.0)
        gram = kernel(x, x) if len(dataset) else np.zeros((0, 0))
        self._chol = []
        self._weights = []
        for i, s2 in enumerate(noise):
            c = self._factor(gram + s2 * np.eye(len(dataset)))
            self._chol.append(c)
            self._weights.append(sla.cho_solve((c, True), y[:, i]) if len(dataset) else np.zeros(0))

    def _factor(self, mat: np.ndarray) -> np.ndarray:
        if mat.size == 0:
            return mat
        try:
            return np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            pass
        try:
            c = np.linalg.cholesky(mat + JITTER * self.kernel.signal_variance * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise GpNumericalError("Gram matrix not positive definite after jitter retry") from exc
        self.jittered = True
        return c

    @property
    def d_x(self) -> int:
        return self.dataset.d_x

    @property
    def d_u(self) -> int:
        return self.dataset.d_u

    def _check_point(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.size != self.kernel.dim:
            raise ValueError(f"query point must have {self.kernel.dim} entries, got {q.size}")
        return q

    def predict(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and (latent, noise-free) variance of ``f(q)`` per output."""
        q = self._check_point(q)
        sf2 = self.kernel.signal_variance
        offset = q[:self.d_x] if self.target == "delta" else np.zeros(self.d_x)
        if len(self.dataset) == 0:
            return offset.copy(), np.full(self.d_x, sf2)
        kq = self.kernel(q[None, :], self.dataset.inputs)[0]
        mean = np.array([kq @ w for w in self._weights]) + offset
        var = np.empty(self.d_x)
        for i, c in enumerate(self._chol):
            v = sla.solve_triangular(c, kq, lower=True)
            var[i] = sf2 - v @ v
        return mean, np.maximum(var, 0.0)

    def jacobian_moments(self, q_star) -> tuple[np.ndarray, np.ndarray]:
        """Mean ``(d_x, d)`` and per-row covariances ``(d_x, d, d)`` of ``df/dq`` at ``q_star``."""
        q = self._check_point(q_star)
        d = self.kernel.dim
        prior = self.kernel.derivative_prior()
        mean = np.zeros((self.d_x, d))
        if self.target == "delta":
            mean[:, :self.d_x] = np.eye(self.d_x)
        covs = np.empty((self.d_x, d, d))
        if len(self.dataset) == 0:
            covs[:] = prior
            return mean, covs
        g = self.kernel.grad(q, self.dataset.inputs)
        for i, (c, w) in enumerate(zip(self._chol, self._weights)):
            mean[i] += g @ w
            v = sla.solve_triangular(c, g.T, lower=True)
            cov = prior - v.T @ v
            cov = 0.5 * (cov + cov.T)
            # project out roundoff-level negative eigenvalues
            vals, vecs = np.linalg.eigh(cov)
            if vals[0] < 0:
                cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T
                cov = 0.5 * (cov + cov.T)
            covs[i] = cov
        return mean, covs

    def linearize(self, q_star) -> GaussianParameterLaw:
        """Gaussian law of the Jacobian ``[A B] = df/dq`` at ``q_star``."""
        mean, covs = self.jacobian_moments(q_star)
        d_x, d = mean.shape
        # vec index of S[i, j] is j * d_x + i, so row blocks interleave
        cov = np.zeros((d * d_x, d * d_x))
        for i in range(d_x):
            cov[i::d_x, i::d_x] = covs[i]
        ref = covs[int(np.argmax([np.trace(c) for c in covs]))]
        ref_tr = np.trace(ref)
        if ref_tr > 0:
            ratios = np.array([np.trace(c) / ref_tr for c in covs])
            if all(np.linalg.norm(c - r * ref) <= PROPORTIONAL_RTOL * max(np.linalg.norm(c), np.linalg.norm(ref))
                   for c, r in zip(covs, ratios)):
                row_cov = np.diag(ratios)
                return GaussianParameterLaw(mean, np.kron(ref, row_cov), row_cov, ref)
        return GaussianParameterLaw(mean, cov)

    def process_noise_estimate(self) -> np.ndarray:
        return np.diag(self.noise_variances)

    def to_dict(self, dataset_ref: str | None = None) -> dict:
        doc = {
            "kernel": self.kernel.to_dict(),
            "noise_variances": self.noise_variances.tolist(),
            "target": self.target,
        }
        if dataset_ref is None:
            doc["dataset"] = self.dataset.to_dict()
        else:
            doc["dataset_ref"] = dataset_ref
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "GpPosterior":
        """Rebuild (refit) from :meth:`to_dict` output; ``dataset_ref`` resolves against ``base_dir``."""
        if "dataset" in doc:
            data = TransitionDataset.from_dict(doc["dataset"])
        else:
            ref = Path(doc["dataset_ref"])
            if base_dir is not None and not ref.is_absolute():
                ref = Path(base_dir) / ref
            data = TransitionDataset.load(ref)
        return cls(data, SeKernel.from_dict(doc["kernel"]), doc["noise_variances"], doc.get("target", "successor"))


def fit(dataset: TransitionDataset, kernel: SeKernel, noise_variances, target: str = "successor") -> GpPosterior:
    return GpPosterior(dataset, kernel, noise_variances, target)


def predict(post: GpPosterior, q) -> tuple[np.ndarray, np.ndarray]:
    return post.predict(q)


def linearize(post: GpPosterior, q_star) -> GaussianParameterLaw:
    return post.linearize(q_star)


def process_noise_estimate(post: GpPosterior) -> np.ndarray:
    return post.process_noise_estimate()
