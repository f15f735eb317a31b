"""Benchmark plants, the synthetic uncertainty generator and experiment runners.

Two experiments are provided:

``synthetic-dist``
    Random parameter laws around the 3-state linear benchmark system, one
    Wishart covariance per cell, with every method graded on samples from the
    non-truncated law.
``cubic``
    GP models learned from rollouts of the cubic variant of the same system,
    with every method graded by simulating the true nonlinear plant.

Each (grid point, repetition) cell owns a random stream keyed by
``(seed, grid index, repetition)``, so running cells in parallel never
changes results.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ExperimentConfig, RiskConfig, SolverConfig, config_hash
from .distributions import (
    GaussianParameterLaw,
    TruncatedLaw,
    n_k_for,
    sample_wishart,
    scenario_sample_bound,
    unvec,
    vec,
)
from .gp import GpPosterior, TransitionDataset
from .linear import (
    CostWeights,
    LinearSystem,
    NotStabilizableError,
    dare_solve,
    finite_horizon_costs,
    spectral_radii,
    spectral_radius,
)
from .persist import atomic_write_text, write_json
from .synthesis import (
    SCHEMA_VERSION,
    InfeasibleInit,
    RestartsExhausted,
    ScenarioSet,
    SynthesisError,
    algorithm1,
    draw_scenarios,
    synth_init,
    synth_worst_case,
)

__all__ = [
    "DEAN_A",
    "NonlinearPlant",
    "dean_linear_system",
    "dean_linear_plant",
    "cubic_plant",
    "synthetic_law",
    "collect_rollouts",
    "boundary_scenarios",
    "LawEvaluation",
    "PlantEvaluation",
    "evaluate_on_law",
    "evaluate_on_plant",
    "MethodResult",
    "ExperimentRecord",
    "run_experiment",
    "write_results",
    "CSV_COLUMNS",
    "METHODS",
]

log = logging.getLogger(__name__)

DEAN_A = np.array([[1.01, 0.01, 0.0], [0.01, 1.01, 0.01], [0.0, 0.01, 1.01]])
CUBIC_M = np.array([[0.3, 0.0, 0.0], [0.3, 0.3, 0.0], [0.3, 0.3, 0.3]])
WISHART_SCALE_DIAG = 0.5
METHODS = ("PR", "CE", "R", "T")
CSV_COLUMNS = [
    "sigma_sq_or_rollouts", "method", "repetition", "feasible", "mean_cost",
    "q25", "q50", "q75", "instability_freq", "runtime_s", "seed",
]


def dean_linear_system() -> tuple[LinearSystem, CostWeights]:
    """The 3-state benchmark system with its weights and process noise."""
    sys = LinearSystem(DEAN_A.copy(), np.eye(3))
    return sys, CostWeights(1e-3 * np.eye(3), np.eye(3), 1e-3 * np.eye(3))


@dataclass(frozen=True, eq=False)
class NonlinearPlant:
    """``x+ = f(x, u) + w`` with ``w ~ N(0, sigma_w)`` around a fixed point.

    ``f`` acts on batches: ``f(x (n, d_x), u (n, d_u)) -> (n, d_x)``.
    ``ref_a``/``ref_b`` are the analytic Jacobians at ``(x_star, u_star)``.
    """

    name: str
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    x_star: np.ndarray
    u_star: np.ndarray
    sigma_w: np.ndarray
    ref_a: np.ndarray
    ref_b: np.ndarray

    @property
    def d_x(self) -> int:
        return self.x_star.size

    @property
    def d_u(self) -> int:
        return self.u_star.size

    @property
    def q_star(self) -> np.ndarray:
        return np.concatenate([self.x_star, self.u_star])

    def reference_system(self) -> LinearSystem:
        return LinearSystem(self.ref_a, self.ref_b)

    def step(self, x, u, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.atleast_2d(x)
        nxt = self.f(x, np.atleast_2d(u))
        if rng is not None and np.any(self.sigma_w):
            nxt = nxt + rng.standard_normal(nxt.shape) * np.sqrt(np.diag(self.sigma_w))
        return nxt


def _dean_dynamics(x, u):
    return x @ DEAN_A.T + u


def _cubic_dynamics(x, u):
    return x @ DEAN_A.T + (x @ CUBIC_M.T) ** 3 + u


def dean_linear_plant(noise: float = 1e-3) -> NonlinearPlant:
    """The linear benchmark wrapped as a plant (cubic term removed)."""
    return NonlinearPlant("dean", _dean_dynamics, np.zeros(3), np.zeros(3), noise * np.eye(3),
                          DEAN_A.copy(), np.eye(3))


def cubic_plant(noise: float = 1e-3) -> NonlinearPlant:
    """Cubic variant ``x+ = A x + (M x)^3 + u + w``; its Jacobian at 0 is ``(A, I)``.

    ``noise`` is the per-state process-noise variance, unpublished for this
    plant; the default reuses the linear benchmark's value.
    """
    return NonlinearPlant("cubic", _cubic_dynamics, np.zeros(3), np.zeros(3), noise * np.eye(3),
                          DEAN_A.copy(), np.eye(3))


def synthetic_law(sigma_sq: float, rng: np.random.Generator) -> GaussianParameterLaw:
    """Law with mean ``[A I]`` and one Wishart draw as the full vec covariance.

    The draw has ``d_x^2 + d_x d_u = 18`` degrees of freedom and scale
    ``sigma_sq * (0.5 I + 0.5 * ones)``.
    """
    if not sigma_sq > 0:
        raise ValueError("sigma_sq must be positive")
    sys, _ = dean_linear_system()
    d_s = sys.d_x * (sys.d_x + sys.d_u)
    scale = sigma_sq * (WISHART_SCALE_DIAG * np.eye(d_s) + (1.0 - WISHART_SCALE_DIAG) * np.ones((d_s, d_s)))
    cov = sample_wishart(scale, d_s, rng)
    return GaussianParameterLaw(sys.parameters, 0.5 * (cov + cov.T))


def collect_rollouts(plant: NonlinearPlant, n_per_rollout: int, n_rollouts: int, input_std: float,
                     rng: np.random.Generator, init_std: float = 0.01) -> TransitionDataset:
    """Random-input rollouts started near the operating point, reset every ``n_per_rollout`` steps."""
    if n_per_rollout < 1 or n_rollouts < 0:
        raise ValueError("rollout counts must be positive")
    if n_rollouts == 0:
        return TransitionDataset.empty(plant.d_x, plant.d_u)
    x = plant.x_star + init_std * rng.standard_normal((n_rollouts, plant.d_x))
    qs, ys = [], []
    for _ in range(n_per_rollout):
        u = plant.u_star + input_std * rng.standard_normal((n_rollouts, plant.d_u))
        nxt = plant.step(x, u, rng)
        qs.append(np.hstack([x, u]))
        ys.append(nxt)
        x = nxt
    # rollout-major row order: all steps of rollout 0, then rollout 1, ...
    q = np.stack(qs, axis=1).reshape(-1, plant.d_x + plant.d_u)
    y = np.stack(ys, axis=1).reshape(-1, plant.d_x)
    return TransitionDataset(q, y)


def boundary_scenarios(tlaw: TruncatedLaw, m: int, rng: np.random.Generator) -> ScenarioSet:
    """Scenarios on the surface of the credible ellipsoid.

    Directions are Gaussian draws, rescaled to Mahalanobis radius
    ``sqrt(radius_sq)``. Because the initial LMI is affine in the parameters,
    these extreme points approximate a worst-case treatment of the region
    more closely than interior samples.
    """
    base = tlaw.base
    vals, vecs = base._factor
    keep = vals > 0
    z = rng.standard_normal((m, int(keep.sum())))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.where(norms > 0, norms, 1.0) * np.sqrt(tlaw.radius_sq)
    draws = vec(base.mean) + z @ (vecs[:, keep] * np.sqrt(vals[keep])).T
    params = unvec(draws, base.d_x)
    prov = {"law": base.fingerprint, "credibility": tlaw.credibility, "m": int(m), "placement": "boundary"}
    return ScenarioSet.from_parameters(params, prov)


@dataclass
class LawEvaluation:
    costs: np.ndarray  # stable samples only
    radii: np.ndarray  # all samples
    instability_freq: float

    @property
    def all_costs(self) -> np.ndarray:
        return self.costs


def evaluate_on_law(k, law: GaussianParameterLaw, weights: CostWeights, n_systems: int, horizon: int,
                    x0, rng: np.random.Generator) -> LawEvaluation:
    """Finite-horizon expected cost of ``k`` over samples of the non-truncated law.

    Costs are returned for stable closed loops only; unstable samples count
    towards ``instability_freq``.
    """
    if n_systems < 1 or horizon < 1:
        raise ValueError("counts must be positive")
    k = np.atleast_2d(k)
    params = law.sample(rng, n_systems)
    d_x = law.d_x
    a_cl = params[:, :, :d_x] + params[:, :, d_x:] @ k
    radii = spectral_radii(a_cl)
    stable = radii < 1.0
    costs = finite_horizon_costs(a_cl[stable], weights.stage(k), weights.sigma_w, x0, horizon)
    return LawEvaluation(costs, radii, float(np.mean(~stable)))


@dataclass
class PlantEvaluation:
    mean_cost: float
    diverged: bool
    run_costs: np.ndarray
    linear_radius: float

    @property
    def stable(self) -> bool:
        return not self.diverged and self.linear_radius < 1.0


def evaluate_on_plant(k, plant: NonlinearPlant, weights: CostWeights, horizon: int, reps: int,
                      divergence_threshold: float, rng: np.random.Generator) -> PlantEvaluation:
    """Mean closed-loop cost over ``reps`` noisy runs from the operating point.

    Per run the cost is ``(1/T) sum_k x'Qx + u'Ru`` in deviation
    coordinates. The evaluation is flagged as diverged if any state of any
    run reaches ``divergence_threshold`` in absolute value.
    """
    k = np.atleast_2d(k)
    x = np.tile(plant.x_star, (reps, 1))
    total = np.zeros(reps)
    diverged = False
    std = np.sqrt(np.diag(plant.sigma_w))
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            dx = x - plant.x_star
            du = dx @ k.T
            total += np.einsum("ni,ij,nj->n", dx, weights.q, dx) + np.einsum("ni,ij,nj->n", du, weights.r, du)
            x = plant.f(x, plant.u_star + du) + rng.standard_normal(x.shape) * std
            if not np.all(np.isfinite(x)) or np.any(np.abs(x) >= divergence_threshold):
                diverged = True
                break
    rho = spectral_radius(plant.ref_a + plant.ref_b @ k)
    if diverged:
        return PlantEvaluation(float("inf"), True, np.full(reps, np.inf), rho)
    costs = total / horizon
    return PlantEvaluation(float(np.mean(costs)), False, costs, rho)


@dataclass
class MethodResult:
    method: str
    feasible: bool
    gain: np.ndarray | None = None
    costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    instability_freq: float = float("nan")
    runtime_s: float | None = None
    detail: dict = field(default_factory=dict)

    def summary(self) -> dict:
        c = self.costs[np.isfinite(self.costs)]
        if not self.feasible or c.size == 0:
            return {"mean_cost": None, "q25": None, "q50": None, "q75": None}
        q25, q50, q75 = np.percentile(c, [25, 50, 75])
        return {"mean_cost": float(np.mean(c)), "q25": float(q25), "q50": float(q50), "q75": float(q75)}

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "feasible": self.feasible,
            "gain": None if self.gain is None else np.atleast_2d(self.gain).tolist(),
            "instability_freq": self.instability_freq if self.feasible else None,
            "runtime_s": self.runtime_s,
            "summary": self.summary(),
            "raw_costs": self.costs.tolist(),
            "detail": self.detail,
        }


@dataclass
class ExperimentRecord:
    experiment: str
    grid_value: float
    grid_index: int
    repetition: int
    seed: int
    methods: dict
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "grid_value": self.grid_value,
            "grid_index": self.grid_index,
            "repetition": self.repetition,
            "seed": self.seed,
            "methods": {name: res.to_dict() for name, res in self.methods.items()},
            "provenance": self.provenance,
        }

    def csv_rows(self) -> list[list]:
        rows = []
        for name in METHODS:
            if name not in self.methods:
                continue
            res = self.methods[name]
            s = res.summary()
            rows.append([
                _fmt(self.grid_value), name, self.repetition, int(res.feasible),
                _fmt(s["mean_cost"]), _fmt(s["q25"]), _fmt(s["q50"]), _fmt(s["q75"]),
                _fmt(res.instability_freq if res.feasible else None),
                _fmt(res.runtime_s), self.seed,
            ])
        return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if not np.isfinite(v) else repr(v)


def cell_seed_sequence(seed: int, grid_index: int, repetition: int) -> np.random.SeedSequence:
    """Random stream owned by one (grid point, repetition) cell."""
    return np.random.SeedSequence(int(seed), spawn_key=(int(grid_index), int(repetition)))


class _Timer:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = round(time.perf_counter() - self.t0, 3) if self.enabled else None
        return False


def _run_pr(tlaw, risk: RiskConfig, weights, solver: SolverConfig, seed: int, timer) -> MethodResult:
    with timer:
        try:
            ctrl = algorithm1(tlaw, risk.profile(), weights, seed, max_restarts=solver.max_restarts,
                              stop=solver.stop(), settings=solver.sdp_settings())
        except InfeasibleInit as exc:
            res = MethodResult("PR", False, detail={"outcome": "InfeasibleInit", "message": str(exc)})
        except RestartsExhausted as exc:
            res = MethodResult("PR", False, detail={"outcome": "RestartsExhausted", "attempts": exc.attempts})
        else:
            res = MethodResult("PR", True, ctrl.gain, detail={"outcome": "certified", "certificate": ctrl.to_dict()})
    res.runtime_s = timer.elapsed
    return res


def _run_r(law, exp: ExperimentConfig, m: int, weights, solver: SolverConfig, rng, timer) -> MethodResult:
    tlaw = TruncatedLaw(law, exp.robust_credibility)
    detail = {"variant": exp.robust_method}
    with timer:
        try:
            if exp.robust_method == "ellipsoid":
                init = synth_worst_case(tlaw, weights, solver.sdp_settings())
            else:
                if exp.robust_method == "boundary":
                    scen = boundary_scenarios(tlaw, m, rng)
                else:
                    scen = draw_scenarios(tlaw, m, rng)
                detail["m_scenarios"] = m
                init = synth_init(scen, weights, solver.sdp_settings())
        except InfeasibleInit as exc:
            res = MethodResult("R", False, detail={**detail, "outcome": "InfeasibleInit", "message": str(exc)})
        except SynthesisError as exc:
            res = MethodResult("R", False, detail={**detail, "outcome": "NumericalError", "message": str(exc)})
        else:
            res = MethodResult("R", True, init.gain, detail={**detail, "outcome": "feasible", "ub": init.ub})
    res.runtime_s = timer.elapsed
    return res


def _run_dare(name: str, sys: LinearSystem, weights, timer) -> MethodResult:
    with timer:
        try:
            _, k = dare_solve(sys, weights)
        except NotStabilizableError as exc:
            res = MethodResult(name, False, detail={"outcome": "NotStabilizable", "message": str(exc)})
        else:
            res = MethodResult(name, True, k, detail={"outcome": "feasible"})
    res.runtime_s = timer.elapsed
    return res


def _pr_scenario_count(risk: RiskConfig, d_x: int, d_u: int) -> int:
    return scenario_sample_bound(risk.eps, risk.beta, n_k_for(d_x, d_u))


def synthetic_cell(law: GaussianParameterLaw, exp: ExperimentConfig, risk: RiskConfig, solver: SolverConfig,
                   weights: CostWeights, ss: np.random.SeedSequence) -> dict:
    """PR, CE and R on one parameter law, graded on a shared evaluation sample."""
    pr_ss, r_ss, eval_ss = ss.spawn(3)
    pr_seed = int(pr_ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
    mean_sys = LinearSystem.from_parameters(law.mean)
    m = _pr_scenario_count(risk, law.d_x, law.d_u)
    results = {
        "PR": _run_pr(TruncatedLaw(law, risk.c), risk, weights, solver, pr_seed, _Timer(exp.record_timings)),
        "CE": _run_dare("CE", mean_sys, weights, _Timer(exp.record_timings)),
        "R": _run_r(law, exp, m, weights, solver, np.random.default_rng(r_ss), _Timer(exp.record_timings)),
    }
    x0 = np.zeros(law.d_x)
    for res in results.values():
        if res.feasible:
            # every method sees the same evaluation systems
            ev = evaluate_on_law(res.gain, law, weights, exp.n_eval_systems, exp.horizon, x0,
                                 np.random.default_rng(eval_ss))
            res.costs = ev.costs
            res.instability_freq = ev.instability_freq
            res.detail["spectral_radius_max"] = float(ev.radii.max())
    return results


def cubic_cell(n_rollouts: int, exp: ExperimentConfig, risk: RiskConfig, solver: SolverConfig,
               ss: np.random.SeedSequence) -> tuple[dict, dict]:
    """Learn a GP model from rollouts, run PR, CE, R and T, grade on the true plant."""
    data_ss, pr_ss, r_ss, eval_ss = ss.spawn(4)
    plant = cubic_plant(exp.plant_noise)
    data = collect_rollouts(plant, exp.rollout_length, n_rollouts, exp.input_std,
                            np.random.default_rng(data_ss), exp.init_std)
    gp = exp.gp
    post = GpPosterior(data, gp.kernel(plant.d_x + plant.d_u), gp.noise(plant.d_x), gp.target)
    law = post.linearize(plant.q_star)
    q, r = np.eye(plant.d_x), np.eye(plant.d_u)
    weights = CostWeights(q, r, post.process_noise_estimate())
    true_weights = CostWeights(q, r, plant.sigma_w)
    pr_seed = int(pr_ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
    m = _pr_scenario_count(risk, law.d_x, law.d_u)
    results = {
        "PR": _run_pr(TruncatedLaw(law, risk.c), risk, weights, solver, pr_seed, _Timer(exp.record_timings)),
        "CE": _run_dare("CE", LinearSystem.from_parameters(law.mean), weights, _Timer(exp.record_timings)),
        "R": _run_r(law, exp, m, weights, solver, np.random.default_rng(r_ss), _Timer(exp.record_timings)),
        "T": _run_dare("T", plant.reference_system(), true_weights, _Timer(exp.record_timings)),
    }
    for res in results.values():
        if res.feasible:
            ev = evaluate_on_plant(res.gain, plant, true_weights, exp.horizon, exp.n_true_reps,
                                   exp.divergence_threshold, np.random.default_rng(eval_ss))
            res.costs = ev.run_costs
            res.instability_freq = 0.0 if ev.stable else 1.0
            res.detail.update({"diverged": ev.diverged, "linear_spectral_radius": ev.linear_radius})
    extra = {"n_data": len(data), "law_mean": law.mean.tolist(),
             "law_cov_trace": float(np.trace(law.covariance))}
    return results, extra


def _run_cell(args) -> ExperimentRecord:
    exp, risk, solver, seed, gi, rep, value, prov = args
    ss = cell_seed_sequence(seed, gi, rep)
    if exp.name == "synthetic-dist":
        law_ss, synth_ss = ss.spawn(2)
        law = synthetic_law(value, np.random.default_rng(law_ss))
        _, weights = dean_linear_system()
        methods = synthetic_cell(law, exp, risk, solver, weights, synth_ss)
        extra = {"law_cov_trace": float(np.trace(law.covariance))}
    else:
        methods, extra = cubic_cell(int(value), exp, risk, solver, ss)
    log.info("cell %s=%s rep %d: %s", exp.name, value, rep,
             ", ".join(f"{k}:{'ok' if v.feasible else 'infeasible'}" for k, v in methods.items()))
    return ExperimentRecord(exp.name, value, gi, rep, seed, methods, {**prov, **extra})


def run_experiment(exp: ExperimentConfig, risk: RiskConfig | None = None, solver: SolverConfig | None = None,
                   seed: int = 0, jobs: int = 1, provenance: dict | None = None) -> list[ExperimentRecord]:
    """Run every (grid point, repetition) cell; records come back in cell order."""
    risk = risk or RiskConfig()
    solver = solver or SolverConfig()
    prov = {"config_hash": config_hash(exp), "code_version": __version__, **(provenance or {})}
    cells = [(exp, risk, solver, int(seed), gi, rep, value, prov)
             for gi, value in enumerate(exp.resolved_grid()) for rep in range(exp.repetitions)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]


def records_csv(records: list[ExperimentRecord], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        writer.writerows(rec.csv_rows())
    return buf.getvalue()


def write_results(records: list[ExperimentRecord], out_dir, header: dict) -> Path:
    """Per-cell JSON files plus ``results.csv``; returns the CSV path.

    ``header`` (schema version, config hash, seed) is embedded in every file.
    """
    out = Path(out_dir)
    for rec in records:
        doc = {**header, **rec.to_dict()}
        write_json(out / "cells" / f"{rec.experiment}_g{rec.grid_index:02d}_r{rec.repetition:02d}.json", doc)
    comment = " ".join(f"{k}={header[k]}" for k in sorted(header))
    return atomic_write_text(out / "results.csv", records_csv(records, comment))


def summary_table(records: list[ExperimentRecord]) -> list[dict]:
    """Per (grid value, method): feasible fraction, mean of mean costs, mean instability."""
    rows = []
    values = sorted({r.grid_value for r in records})
    for value in values:
        recs = [r for r in records if r.grid_value == value]
        for name in METHODS:
            res = [r.methods[name] for r in recs if name in r.methods]
            if not res:
                continue
            feas = [x for x in res if x.feasible]
            means = [x.summary()["mean_cost"] for x in feas if x.summary()["mean_cost"] is not None]
            rows.append({
                "grid_value": value,
                "method": name,
                "feasible_frac": len(feas) / len(res),
                "mean_cost": float(np.mean(means)) if means else None,
                "instability_freq": float(np.mean([x.instability_freq for x in feas])) if feas else None,
            })
    return rows
