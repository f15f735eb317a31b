"""Scenario-based probabilistically robust LQR synthesis.

The pipeline is: draw scenarios from the truncated parameter law, solve the
common-Lyapunov scenario LMI for an initial gain, tighten it with
majorize-minimize steps (one Lyapunov matrix per scenario, the matrix
inverse replaced by its tangent at the previous iterate), then validate the
final gain on fresh samples with a Hoeffding-sized Monte-Carlo test.

Internally the LMIs are solved on a rescaled problem (noise covariance
normalized to unit mean variance, weights to unit spectral norm); gains are
scale invariant and all reported costs are mapped back to the caller's units.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    RiskProfile,
    TruncatedLaw,
    hoeffding_sample_bound,
    n_k_for,
    sample_truncated,
    scenario_sample_bound,
    unvec,
)
from .linear import CostWeights, LinearSystem, spectral_radii
from .sdp import SdpProblem, SdpSettings, SdpStatus, scalar_times, trace

__all__ = [
    "ScenarioSet",
    "InitResult",
    "ImproveStep",
    "IterationResult",
    "ValidationReport",
    "CertifiedController",
    "StopCriterion",
    "SynthesisError",
    "InfeasibleInit",
    "RestartsExhausted",
    "SynthesisNumericalError",
    "draw_scenarios",
    "synth_init",
    "synth_worst_case",
    "linearized_inverse",
    "synth_improve_step",
    "synth_iterate",
    "validate",
    "algorithm1",
    "attempt_seeds",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"
# relative floor for the strictly positive definite Lyapunov variable
PD_FLOOR = 1e-6
MONOTONE_RTOL = 1e-6
# condition-number cap on Y for the homogeneous phase-1 tests
PHASE1_COND = 1e7


class SynthesisError(RuntimeError):
    pass


class InfeasibleInit(SynthesisError):
    """The initial scenario LMI has no solution for the drawn scenarios."""


class RestartsExhausted(SynthesisError):
    """No validated controller was found within the restart budget."""

    def __init__(self, msg: str, attempts: list | None = None):
        super().__init__(msg)
        self.attempts = attempts or []


class SynthesisNumericalError(SynthesisError):
    """The SDP backend failed without a conclusive feasibility verdict."""


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    a: np.ndarray  # (M, d_x, d_x)
    b: np.ndarray  # (M, d_x, d_u)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[0] < 1:
            raise ValueError("scenario arrays must be (M, d_x, d_x) and (M, d_x, d_u) with M >= 1")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_parameters(cls, params: np.ndarray, provenance: dict | None = None) -> "ScenarioSet":
        params = np.asarray(params, dtype=float)
        if params.ndim == 2:
            params = params[None]
        d_x = params.shape[1]
        return cls(params[:, :, :d_x], params[:, :, d_x:], provenance or {})

    @classmethod
    def from_systems(cls, systems: list[LinearSystem]) -> "ScenarioSet":
        return cls(np.stack([s.a for s in systems]), np.stack([s.b for s in systems]))

    def __len__(self) -> int:
        return self.a.shape[0]

    @property
    def d_x(self) -> int:
        return self.a.shape[1]

    @property
    def d_u(self) -> int:
        return self.b.shape[2]

    @property
    def parameters(self) -> np.ndarray:
        return np.concatenate([self.a, self.b], axis=2)

    @property
    def systems(self) -> list[LinearSystem]:
        return [LinearSystem(a, b) for a, b in zip(self.a, self.b)]

    def closed_loop_radii(self, k: np.ndarray) -> np.ndarray:
        return spectral_radii(self.a + self.b @ np.atleast_2d(k))


def draw_scenarios(tlaw: TruncatedLaw, m: int, rng: np.random.Generator, seed_info=None) -> ScenarioSet:
    params = sample_truncated(tlaw, rng, m)
    prov = {"law": tlaw.base.fingerprint, "credibility": tlaw.credibility, "m": int(m)}
    if seed_info is not None:
        prov["seed"] = seed_info
    return ScenarioSet.from_parameters(params, prov)


@dataclass(frozen=True)
class StopCriterion:
    rel_tol: float = 1e-4
    max_iter: int = 20


@dataclass
class InitResult:
    gain: np.ndarray
    y: np.ndarray
    ub: float
    solve_info: dict = field(default_factory=dict)


@dataclass
class ImproveStep:
    gain: np.ndarray
    xs: np.ndarray  # (M, d_x, d_x)
    objective: float
    solve_info: dict = field(default_factory=dict)


@dataclass
class IterationResult:
    gain: np.ndarray
    objective_trace: list
    xs: np.ndarray
    breakdown: bool = False
    message: str = ""
    init: InitResult | None = None


class _Scaled:
    """Weights normalized for conditioning; gains are invariant under it."""

    def __init__(self, weights: CostWeights):
        d_x = weights.q.shape[0]
        tr = float(np.trace(weights.sigma_w))
        self.noise_scale = tr / d_x if tr > 0 else 1.0
        self.weight_scale = max(np.linalg.norm(weights.q, 2), np.linalg.norm(weights.r, 2))
        self.q = weights.q / self.weight_scale
        self.r = weights.r / self.weight_scale
        self.sigma_w = weights.sigma_w / self.noise_scale
        self.r_inv = np.linalg.inv(self.r)
        self.r_inv = 0.5 * (self.r_inv + self.r_inv.T)
        self.q_half = _psd_sqrt(self.q)
        self.sw_half = _psd_sqrt(self.sigma_w)
        self.q_singular = np.linalg.eigvalsh(self.q)[0] <= 1e-12

    @property
    def cost_scale(self) -> float:
        return self.noise_scale * self.weight_scale


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return 0.5 * (root + root.T)


def _solve_info(sol) -> dict:
    return {
        "status": sol.status.value,
        "solver_status": sol.solver_status,
        "iterations": sol.iterations,
        "gap": sol.gap,
        "min_lmi_eig": sol.min_lmi_eig,
    }


def _scenarios_stabilizable(scenarios: ScenarioSet, settings) -> SdpStatus:
    """Feasibility of the common-Lyapunov stability core, normalized to ``I <= Y <= PHASE1_COND I``.

    Used only when the cost-bounding LMI ends without a verdict: the core is
    homogeneous in ``(Y, L)``, so the solver sees a well-posed problem.
    """
    d_x, d_u = scenarios.d_x, scenarios.d_u
    prob = SdpProblem("init_phase1")
    lv = prob.variable("L", (d_u, d_x))
    yv = prob.symmetric("Y", d_x)
    for i in range(len(scenarios)):
        prob.add_lmi([[yv], [scenarios.a[i] @ yv + scenarios.b[i] @ lv, yv]], name=f"core{i}")
    prob.add_psd(yv - np.eye(d_x), name="normalize")
    prob.add_psd(PHASE1_COND * np.eye(d_x) - yv, name="cond_cap")
    return prob.solve(settings).status


def synth_init(scenarios: ScenarioSet, weights: CostWeights, settings: SdpSettings | None = None) -> InitResult:
    """Common-Lyapunov scenario LMI; returns ``K = L Y^-1`` and the cost bound ``tr Z``.

    Raises :class:`InfeasibleInit` if the LMI is infeasible for the scenarios
    and :class:`SynthesisNumericalError` if the solver fails otherwise or the
    recovered gain does not stabilize every scenario.
    """
    sc = _Scaled(weights)
    d_x, d_u = scenarios.d_x, scenarios.d_u
    prob = SdpProblem("init")
    lv = prob.variable("L", (d_u, d_x))
    zv = prob.symmetric("Z", d_x)
    yv = prob.symmetric("Y", d_x)
    eye_x = np.eye(d_x)
    for i in range(len(scenarios)):
        ai, bi = scenarios.a[i], scenarios.b[i]
        prob.add_lmi(
            [
                [yv],
                [ai @ yv + bi @ lv, yv],
                [sc.q_half @ yv, None, eye_x],
                [lv, None, None, sc.r_inv],
            ],
            name=f"scenario{i}",
        )
    prob.add_lmi([[zv], [sc.sw_half, yv]], name="noise")
    prob.add_psd(yv - PD_FLOOR * eye_x, name="y_floor")
    prob.minimize(trace(zv))
    sol = prob.solve(settings)
    info = _solve_info(sol)
    if sol.status is SdpStatus.INFEASIBLE:
        raise InfeasibleInit(f"initial scenario LMI infeasible ({sol.solver_status})")
    if not sol.optimal:
        if _scenarios_stabilizable(scenarios, settings) is SdpStatus.INFEASIBLE:
            raise InfeasibleInit("no common Lyapunov certificate for the scenarios (phase-1 test)")
        raise SynthesisNumericalError(f"initial scenario LMI not solved: {sol.status.value} ({sol.solver_status})")
    y = sol.value(yv)
    y = 0.5 * (y + y.T)
    gain = np.linalg.solve(y.T, sol.value(lv).T).T
    radii = scenarios.closed_loop_radii(gain)
    info["max_scenario_radius"] = float(radii.max())
    if radii.max() >= 1.0:
        raise SynthesisNumericalError(
            f"initial gain fails to stabilize a scenario (max radius {radii.max():.6f})"
        )
    # Y is the inverse Lyapunov matrix; in caller units X scales with the weights
    return InitResult(gain, y / sc.weight_scale, sol.objective * sc.cost_scale, info)


def _ellipsoid_spread(tlaw: TruncatedLaw) -> np.ndarray:
    """``sum_j E_j E_j'`` for the columns ``E_j`` of ``r * Sigma^(1/2)`` reshaped to ``[A B]``.

    Every member of the credible ellipsoid is ``S_bar + sum_j delta_j E_j``
    with ``|delta| <= 1`` and ``r^2`` the ellipsoid's Mahalanobis radius.
    """
    base = tlaw.base
    vals, vecs = base._factor
    g = vecs * np.sqrt(vals * tlaw.radius_sq)
    e = unvec(g.T, base.d_x)  # (d_s, d_x, d_x + d_u)
    spread = np.einsum("jab,jcb->ac", e, e)
    return 0.5 * (spread + spread.T)



def _worst_case_stabilizable(a_bar, b_bar, spread, settings) -> SdpStatus:
    """Feasibility of the robust stability core alone, normalized to ``I <= Y <= PHASE1_COND I``.

    The core is homogeneous in ``(Y, L, lam)``, which makes the lower bound
    on ``Y`` a normalization. This gives the solver a well-posed problem
    with a conclusive verdict when the full cost-bounding LMI stalls near
    infeasibility.
    """
    d_x, d_u = b_bar.shape
    prob = SdpProblem("worst_case_phase1")
    lv = prob.variable("L", (d_u, d_x))
    yv = prob.symmetric("Y", d_x)
    lam = prob.variable("lam", (1, 1))
    prob.add_lmi(
        [
            [yv],
            [a_bar @ yv + b_bar @ lv, yv - scalar_times(lam, spread)],
            [yv, None, scalar_times(lam, np.eye(d_x))],
            [lv, None, None, scalar_times(lam, np.eye(d_u))],
        ],
        name="core",
    )
    prob.add_psd(yv - np.eye(d_x), name="normalize")
    prob.add_psd(PHASE1_COND * np.eye(d_x) - yv, name="cond_cap")
    return prob.solve(settings).status


def synth_worst_case(tlaw: TruncatedLaw, weights: CostWeights, settings: SdpSettings | None = None) -> InitResult:
    """Common-Lyapunov LMI robust over the whole credible ellipsoid of ``tlaw``.

    The parameter deviation enters the initial LMI as ``E (delta (x) I) [Y; L]``
    with ``|delta| <= 1``. Bounding the structured factor by an arbitrary
    contraction and applying Petersen's lemma gives one LMI with a scalar
    multiplier ``lam``: the second diagonal block becomes
    ``Y - lam * sum_j E_j E_j'`` and a border ``[Y; L]`` against ``lam * I``
    is appended. The result is sufficient (conservative) for every system in
    the ellipsoid.

    Raises :class:`InfeasibleInit` when no such controller exists.
    """
    sc = _Scaled(weights)
    base = tlaw.base
    d_x, d_u = base.d_x, base.d_u
    a_bar, b_bar = base.mean[:, :d_x], base.mean[:, d_x:]
    spread = _ellipsoid_spread(tlaw)
    phase1 = _worst_case_stabilizable(a_bar, b_bar, spread, settings)
    if phase1 is SdpStatus.INFEASIBLE:
        raise InfeasibleInit("no common Lyapunov certificate over the credible ellipsoid (phase-1 test)")
    prob = SdpProblem("worst_case")
    lv = prob.variable("L", (d_u, d_x))
    zv = prob.symmetric("Z", d_x)
    yv = prob.symmetric("Y", d_x)
    lam = prob.variable("lam", (1, 1))
    eye_x, eye_u = np.eye(d_x), np.eye(d_u)
    prob.add_lmi(
        [
            [yv],
            [a_bar @ yv + b_bar @ lv, yv - scalar_times(lam, spread)],
            [sc.q_half @ yv, None, eye_x],
            [lv, None, None, sc.r_inv],
            [yv, None, None, None, scalar_times(lam, eye_x)],
            [lv, None, None, None, None, scalar_times(lam, eye_u)],
        ],
        name="ellipsoid",
    )
    prob.add_lmi([[zv], [sc.sw_half, yv]], name="noise")
    prob.add_psd(yv - PD_FLOOR * eye_x, name="y_floor")
    prob.minimize(trace(zv))
    sol = prob.solve(settings)
    info = _solve_info(sol)
    if sol.status is SdpStatus.INFEASIBLE:
        raise InfeasibleInit(f"worst-case LMI infeasible ({sol.solver_status})")
    if not sol.optimal:
        raise SynthesisNumericalError(f"worst-case LMI not solved: {sol.status.value} ({sol.solver_status})")
    y = sol.value(yv)
    y = 0.5 * (y + y.T)
    gain = np.linalg.solve(y.T, sol.value(lv).T).T
    rho = float(spectral_radii((a_bar + b_bar @ gain)[None])[0])
    info.update({"multiplier": float(sol.value(lam)[0, 0]), "nominal_radius": rho})
    if rho >= 1.0:
        raise SynthesisNumericalError(f"worst-case gain fails on the mean system (radius {rho:.6f})")
    return InitResult(gain, y / sc.weight_scale, sol.objective * sc.cost_scale, info)


def linearized_inverse(x_bar: np.ndarray):
    """Tangent of ``X -> X^-1`` at ``x_bar``: ``T(X) = 2 x_bar^-1 - x_bar^-1 X x_bar^-1``.

    Works on arrays and on affine SDP expressions.
    """
    x_bar = np.atleast_2d(np.asarray(x_bar, dtype=float))
    vals = np.linalg.eigvalsh(0.5 * (x_bar + x_bar.T))
    if vals[0] <= 0:
        raise ValueError("linearization point must be positive definite")
    inv = np.linalg.inv(x_bar)
    inv = 0.5 * (inv + inv.T)

    def tangent(x):
        return 2.0 * inv - inv @ x @ inv

    return tangent


def _improve(scenarios: ScenarioSet, sc: _Scaled, x_bars_scaled: np.ndarray, settings) -> tuple:
    d_x, d_u = scenarios.d_x, scenarios.d_u
    m = len(scenarios)
    prob = SdpProblem("improve")
    kv = prob.variable("K", (d_u, d_x))
    xvs = [prob.symmetric(f"X{i}", d_x) for i in range(m)]
    objective = 0
    for i in range(m):
        ai, bi, xi = scenarios.a[i], scenarios.b[i], xvs[i]
        tan = linearized_inverse(x_bars_scaled[i])
        prob.add_lmi(
            [
                [xi - sc.q],
                [ai + bi @ kv, tan(xi)],
                [kv, None, sc.r_inv],
            ],
            name=f"scenario{i}",
        )
        if sc.q_singular:
            prob.add_psd(xi - PD_FLOOR * np.eye(d_x), name=f"x_floor{i}")
        objective = objective + trace(xi @ sc.sigma_w)
    prob.minimize((1.0 / m) * objective)
    sol = prob.solve(settings)
    return sol, kv, xvs


def synth_improve_step(scenarios: ScenarioSet, weights: CostWeights, x_bars, settings: SdpSettings | None = None) -> ImproveStep:
    """One convexified majorize-minimize step around ``x_bars`` (one per scenario).

    Raises :class:`SynthesisNumericalError` if the step is not solved to a
    verified optimum.
    """
    sc = _Scaled(weights)
    x_bars = np.asarray(x_bars, dtype=float)
    if x_bars.ndim == 2:
        x_bars = np.broadcast_to(x_bars, (len(scenarios),) + x_bars.shape)
    if x_bars.shape[0] != len(scenarios):
        raise ValueError("need one linearization point per scenario")
    sol, kv, xvs = _improve(scenarios, sc, x_bars / sc.weight_scale, settings)
    if not sol.optimal:
        raise SynthesisNumericalError(f"improvement step not solved: {sol.status.value} ({sol.solver_status})")
    xs = np.stack([sol.value(x) for x in xvs])
    xs = 0.5 * (xs + np.swapaxes(xs, 1, 2))
    return ImproveStep(sol.value(kv), xs * sc.weight_scale, sol.objective * sc.cost_scale, _solve_info(sol))


def synth_iterate(scenarios: ScenarioSet, weights: CostWeights, stop: StopCriterion | None = None,
                  settings: SdpSettings | None = None, init: InitResult | None = None) -> IterationResult:
    """Initial LMI followed by majorize-minimize steps until the stop criterion.

    The returned ``objective_trace`` starts with the initial bound. On a failed
    or unverifiable step the last verified gain is returned with
    ``breakdown=True``.
    """
    stop = stop or StopCriterion()
    if init is None:
        init = synth_init(scenarios, weights, settings)
    y_inv = np.linalg.inv(init.y)
    xs = np.broadcast_to(0.5 * (y_inv + y_inv.T), (len(scenarios),) + init.y.shape).copy()
    gain = init.gain
    objective_trace = [init.ub]
    for it in range(stop.max_iter):
        try:
            step = synth_improve_step(scenarios, weights, xs, settings)
        except (SynthesisNumericalError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("majorize-minimize step %d failed: %s", it, exc)
            return IterationResult(gain, objective_trace, xs, True, str(exc), init)
        if np.any(np.linalg.eigvalsh(step.xs)[:, 0] <= 0) or scenarios.closed_loop_radii(step.gain).max() >= 1.0:
            msg = f"step {it} returned an unverifiable iterate"
            log.warning(msg)
            return IterationResult(gain, objective_trace, xs, True, msg, init)
        prev = objective_trace[-1]
        if step.objective > prev * (1.0 + MONOTONE_RTOL):
            msg = f"step {it} increased the objective ({prev:.10g} -> {step.objective:.10g})"
            log.warning(msg)
            return IterationResult(gain, objective_trace, xs, True, msg, init)
        gain, xs = step.gain, step.xs
        objective_trace.append(step.objective)
        if (prev - step.objective) < stop.rel_tol * abs(prev):
            break
    return IterationResult(gain, objective_trace, xs, False, "", init)


@dataclass
class ValidationReport:
    empirical_stability: float
    m_validation: int
    passed: bool
    radius_min: float
    radius_median: float
    radius_max: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "empirical_stability": self.empirical_stability,
            "m_validation": self.m_validation,
            "pass": self.passed,
            "threshold": self.threshold,
            "spectral_radius": {"min": self.radius_min, "median": self.radius_median, "max": self.radius_max},
        }


def validate(k, tlaw: TruncatedLaw, profile: RiskProfile, rng: np.random.Generator,
             m_validation: int | None = None) -> ValidationReport:
    """Monte-Carlo stability check of ``k`` on fresh samples of the truncated law."""
    m_req = hoeffding_sample_bound(profile.eps_val, profile.alpha)
    m_val = m_req if m_validation is None else int(m_validation)
    if m_val < m_req:
        raise ValueError(f"m_validation={m_val} is below the Hoeffding bound {m_req}")
    params = sample_truncated(tlaw, rng, m_val)
    d_x = tlaw.base.d_x
    k = np.atleast_2d(k)
    radii = spectral_radii(params[:, :, :d_x] + params[:, :, d_x:] @ k)
    phi = float(np.mean(radii < 1.0))
    return ValidationReport(
        empirical_stability=phi,
        m_validation=m_val,
        passed=phi >= 1.0 - profile.eps,
        radius_min=float(radii.min()),
        radius_median=float(np.median(radii)),
        radius_max=float(radii.max()),
        threshold=1.0 - profile.eps,
    )


@dataclass
class CertifiedController:
    gain: np.ndarray
    profile: RiskProfile
    m_scenarios: int
    m_validation: int
    empirical_stability: float
    objective_trace: list
    seeds: dict
    attempts: int = 1
    breakdown: bool = False

    @property
    def guaranteed_stability_prob(self) -> float:
        return self.profile.guaranteed_stability_prob

    @property
    def confidence(self) -> float:
        return 1.0 - self.profile.alpha

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "gain": np.atleast_2d(self.gain).tolist(),
            "profile": self.profile.as_dict(),
            "m_scenarios": self.m_scenarios,
            "m_validation": self.m_validation,
            "empirical_stability": self.empirical_stability,
            "guaranteed_stability_prob": self.guaranteed_stability_prob,
            "confidence": self.confidence,
            "objective_trace": [float(v) for v in self.objective_trace],
            "seeds": self.seeds,
            "attempts": self.attempts,
            "breakdown": self.breakdown,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CertifiedController":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported controller schema {doc.get('schema_version')!r}")
        return cls(
            gain=np.array(doc["gain"], dtype=float, ndmin=2),
            profile=RiskProfile(**doc["profile"]),
            m_scenarios=int(doc["m_scenarios"]),
            m_validation=int(doc["m_validation"]),
            empirical_stability=float(doc["empirical_stability"]),
            objective_trace=list(doc["objective_trace"]),
            seeds=dict(doc["seeds"]),
            attempts=int(doc.get("attempts", 1)),
            breakdown=bool(doc.get("breakdown", False)),
        )


def attempt_seeds(seed: int, attempt: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Disjoint synthesis and validation streams for one attempt of :func:`algorithm1`."""
    root = np.random.SeedSequence(seed)
    return (np.random.SeedSequence(root.entropy, spawn_key=(attempt, 0)),
            np.random.SeedSequence(root.entropy, spawn_key=(attempt, 1)))


def algorithm1(tlaw: TruncatedLaw, profile: RiskProfile, weights: CostWeights, seed,
               max_restarts: int = 10, stop: StopCriterion | None = None,
               settings: SdpSettings | None = None, m_scenarios: int | None = None) -> CertifiedController:
    """Draw scenarios, synthesize, validate; redraw until validation passes.

    ``seed`` is an integer (or a Generator, from which one is drawn). Each
    attempt uses its own synthesis and validation streams derived from it.
    Raises :class:`InfeasibleInit` as soon as the initial LMI is infeasible and
    :class:`RestartsExhausted` after ``1 + max_restarts`` failed attempts.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    seed = int(seed)
    if abs(tlaw.credibility - profile.c) > 1e-12:
        raise ValueError("truncated law credibility must match profile.c")
    d_x, d_u = tlaw.base.d_x, tlaw.base.d_u
    m_req = scenario_sample_bound(profile.eps, profile.beta, n_k_for(d_x, d_u))
    m = m_req if m_scenarios is None else int(m_scenarios)
    m_val = hoeffding_sample_bound(profile.eps_val, profile.alpha)
    history = []
    for attempt in range(max_restarts + 1):
        synth_ss, val_ss = attempt_seeds(seed, attempt)
        t0 = time.perf_counter()
        scenarios = draw_scenarios(tlaw, m, np.random.default_rng(synth_ss), seed_info=[seed, attempt, 0])
        try:
            result = synth_iterate(scenarios, weights, stop, settings)
        except SynthesisNumericalError as exc:
            log.info("attempt %d: numerical failure in initial LMI: %s", attempt, exc)
            history.append({"attempt": attempt, "outcome": "numerical", "detail": str(exc)})
            continue
        report = validate(result.gain, tlaw, profile, np.random.default_rng(val_ss), m_val)
        log.info("attempt %d: %d MM steps, phi_hat=%.5f (%.2fs)", attempt,
                 len(result.objective_trace) - 1, report.empirical_stability, time.perf_counter() - t0)
        history.append({"attempt": attempt, "outcome": "validated" if report.passed else "rejected",
                        "empirical_stability": report.empirical_stability})
        if report.passed:
            return CertifiedController(
                gain=result.gain,
                profile=profile,
                m_scenarios=m,
                m_validation=m_val,
                empirical_stability=report.empirical_stability,
                objective_trace=result.objective_trace,
                seeds={"root": seed, "attempt": attempt,
                       "synthesis_spawn_key": [attempt, 0], "validation_spawn_key": [attempt, 1]},
                attempts=attempt + 1,
                breakdown=result.breakdown,
            )
    raise RestartsExhausted(f"no validated controller after {max_restarts + 1} attempts", history)

