"""Declarative run configuration, validated before any work starts.

Every protocol parameter is a key with its published default. Unknown keys are
rejected. The canonical JSON form of a validated config is hashed into
every output file.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .distributions import RiskProfile
from .gp import SeKernel
from .linear import CostWeights
from .sdp import SdpSettings
from .synthesis import StopCriterion

__all__ = [
    "RiskConfig",
    "SolverConfig",
    "GpConfig",
    "WeightsConfig",
    "ExperimentConfig",
    "LearnConfig",
    "SynthesizeConfig",
    "RunConfig",
    "load_config",
    "config_hash",
    "DESK_GRIDS",
]

DESK_GRIDS = {
    "synthetic-dist": [1e-6, 1e-5, 1e-4, 1e-3],
    "cubic": [3, 5, 8],
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RiskConfig(_Strict):
    """Risk profile ``(c, eps, beta, eps_val, alpha)``."""

    c: float = 0.98
    eps: float = 0.02
    beta: float = 0.20
    eps_val: float = 0.01
    alpha: float = 0.001

    @model_validator(mode="after")
    def _valid(self):
        self.profile()
        return self

    def profile(self) -> RiskProfile:
        return RiskProfile(self.c, self.eps, self.beta, self.eps_val, self.alpha)


class SolverConfig(_Strict):
    feas_tol: float = Field(1e-7, gt=0)
    gap_tol: float = Field(1e-7, gt=0)
    max_iter: int = Field(20_000, ge=1)
    solver_tol: float = Field(1e-9, gt=0)
    rel_tol: float = Field(1e-4, ge=0)
    mm_max_iter: int = Field(20, ge=0)
    max_restarts: int = Field(10, ge=0)

    def sdp_settings(self) -> SdpSettings:
        return SdpSettings(self.feas_tol, self.gap_tol, self.max_iter, self.solver_tol)

    def stop(self) -> StopCriterion:
        return StopCriterion(self.rel_tol, self.mm_max_iter)


def _vector(value, n: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float, ndmin=1)
    if arr.size == 1:
        arr = np.full(n, arr[0])
    if arr.shape != (n,):
        raise ValueError(f"{name} needs 1 or {n} entries")
    return arr


class GpConfig(_Strict):
    """GP hyperparameters; scalars broadcast over dimensions.

    The defaults are implementer choices: the fixed values used for the
    cubic benchmark are not published.
    """

    signal_variance: float = Field(1.0, gt=0)
    lengthscales: float | list[float] = 1.0
    noise_variances: float | list[float] = 1e-3
    target: Literal["successor", "delta"] = "successor"

    @field_validator("lengthscales", "noise_variances")
    @classmethod
    def _positive(cls, v):
        if np.any(np.asarray(v, dtype=float) <= 0):
            raise ValueError("must be positive")
        return v

    def kernel(self, dim: int) -> SeKernel:
        return SeKernel(self.signal_variance, _vector(self.lengthscales, dim, "lengthscales"))

    def noise(self, d_x: int) -> np.ndarray:
        return _vector(self.noise_variances, d_x, "noise_variances")


class WeightsConfig(_Strict):
    """Cost weights; ``None`` means the benchmark's own default."""

    q: Optional[list[list[float]]] = None
    r: Optional[list[list[float]]] = None
    sigma_w: Optional[list[list[float]]] = None

    def resolve(self, default: CostWeights) -> CostWeights:
        return CostWeights(
            default.q if self.q is None else self.q,
            default.r if self.r is None else self.r,
            default.sigma_w if self.sigma_w is None else self.sigma_w,
        )


class ExperimentConfig(_Strict):
    """Protocol parameters for the two benchmark experiments."""

    name: Literal["synthetic-dist", "cubic"] = "synthetic-dist"
    # sigma^2 values for synthetic-dist, rollout counts for cubic; None picks the desk grid
    grid: Optional[list[float]] = None
    repetitions: int = Field(5, ge=1)
    robust_credibility: float = Field(0.95, gt=0, lt=1)
    # "ellipsoid": LMI robust over the whole credible region; the others use
    # the initial scenario LMI with samples inside or on the region's boundary
    robust_method: Literal["ellipsoid", "boundary", "interior"] = "ellipsoid"
    n_eval_systems: int = Field(1_000, ge=1)
    horizon: int = Field(200, ge=1)
    n_true_reps: int = Field(200, ge=1)
    rollout_length: int = Field(6, ge=1)
    input_std: float = Field(0.1, ge=0)
    init_std: float = Field(0.01, ge=0)
    plant_noise: float = Field(1e-3, ge=0)
    divergence_threshold: float = Field(1000.0, gt=0)
    gp: GpConfig = GpConfig(signal_variance=1.0, lengthscales=1.0, noise_variances=1e-3)
    record_timings: bool = False

    @field_validator("grid")
    @classmethod
    def _grid(cls, v):
        if v is not None and (len(v) == 0 or any(g <= 0 for g in v)):
            raise ValueError("grid must be non-empty and positive")
        return v

    @model_validator(mode="after")
    def _rollouts_integral(self):
        if self.name == "cubic" and self.grid is not None and any(float(g) != int(g) for g in self.grid):
            raise ValueError("cubic grid entries are rollout counts and must be integers")
        return self

    def resolved_grid(self) -> list[float]:
        grid = self.grid if self.grid is not None else DESK_GRIDS[self.name]
        if self.name == "cubic":
            return [int(g) for g in grid]
        return [float(g) for g in grid]

    def paper_scale(self) -> "ExperimentConfig":
        """Restore the published repetition and evaluation counts."""
        return self.model_copy(update={"repetitions": 25, "n_eval_systems": 10_000})


class LearnConfig(_Strict):
    """Source data for ``learn``: a dataset file or freshly collected rollouts."""

    dataset: Optional[str] = None
    plant: Literal["cubic"] = "cubic"
    n_rollouts: int = Field(5, ge=0)
    rollout_length: int = Field(6, ge=1)
    input_std: float = Field(0.1, ge=0)
    init_std: float = Field(0.01, ge=0)
    plant_noise: float = Field(1e-3, ge=0)
    operating_point: Optional[list[float]] = None
    gp: GpConfig = GpConfig()


class SynthesizeConfig(_Strict):
    """Law source for ``synthesize``: exactly one of a law file, a learn
    section, or a synthetic benchmark law with the given ``sigma_sq``.

    Weights left unset default to ``Q = I``, ``R = I`` and the process noise
    stored with the law (the benchmark's own weights for synthetic laws).
    """

    law: Optional[str] = None
    learn: Optional[LearnConfig] = None
    synthetic_sigma_sq: Optional[float] = Field(None, gt=0)
    weights: WeightsConfig = WeightsConfig()

    @model_validator(mode="after")
    def _one_source(self):
        given = [x is not None for x in (self.law, self.learn, self.synthetic_sigma_sq)]
        if sum(given) != 1:
            raise ValueError("give exactly one of 'law', 'learn' or 'synthetic_sigma_sq'")
        return self


class RunConfig(_Strict):
    seed: int = 0
    out: Optional[str] = None
    risk: RiskConfig = RiskConfig()
    solver: SolverConfig = SolverConfig()
    learn: LearnConfig = LearnConfig()
    synthesize: Optional[SynthesizeConfig] = None
    experiment: ExperimentConfig = ExperimentConfig()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: BaseModel) -> str:
    """Short SHA-256 of the canonical JSON form of a validated config."""
    text = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path=None) -> RunConfig:
    """Load a YAML (or JSON) run config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    doc = yaml.safe_load(Path(path).read_text())
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a mapping")
    return RunConfig.model_validate(doc)
