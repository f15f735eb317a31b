"""Scenario LMI, majorize-minimize steps, validation and the certified loop."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayeslqr.benchmarks import boundary_scenarios, dean_linear_system, synthetic_law
from bayeslqr.distributions import (
    GaussianParameterLaw,
    RiskProfile,
    TruncatedLaw,
    hoeffding_sample_bound,
    n_k_for,
    scenario_sample_bound,
)
from bayeslqr.linear import CostWeights, LinearSystem, dare_solve, lyapunov_cost
from bayeslqr.synthesis import (
    CertifiedController,
    InfeasibleInit,
    RestartsExhausted,
    ScenarioSet,
    StopCriterion,
    algorithm1,
    attempt_seeds,
    draw_scenarios,
    linearized_inverse,
    synth_improve_step,
    synth_init,
    synth_iterate,
    synth_worst_case,
    validate,
)

UNIT = CostWeights([[1.0]], [[1.0]], [[1.0]])
PROFILE = RiskProfile(0.98, 0.02, 0.20, 0.01, 0.001)


def _scalar_set(*a_values, b=1.0):
    m = len(a_values)
    return ScenarioSet(np.array(a_values, dtype=float).reshape(m, 1, 1), np.full((m, 1, 1), b))


def _dare_reference(a=0.5, b=1.0):
    p, k = dare_solve(LinearSystem([[a]], [[b]]), UNIT)
    return p[0, 0], k


# --- initial scenario LMI ---------------------------------------------------------

def test_init_single_scenario_is_tight():
    p, k = _dare_reference()
    res = synth_init(_scalar_set(0.5), UNIT)
    assert res.ub == pytest.approx(p, abs=1e-4)
    np.testing.assert_allclose(res.gain, k, atol=1e-3)


def test_init_unstabilizable_scenario():
    with pytest.raises(InfeasibleInit):
        synth_init(_scalar_set(2.0, b=0.0), UNIT)


def test_init_two_scenarios_share_a_lyapunov_function():
    scen = _scalar_set(0.5, -0.5)
    res = synth_init(scen, UNIT)
    assert np.all(scen.closed_loop_radii(res.gain) < 1.0)


def test_init_stabilizes_every_benchmark_scenario():
    law = TruncatedLaw(synthetic_law(1e-5, np.random.default_rng(0)), 0.98)
    scen = draw_scenarios(law, 30, np.random.default_rng(1))
    _, weights = dean_linear_system()
    res = synth_init(scen, weights)
    assert np.all(scen.closed_loop_radii(res.gain) < 1.0)
    assert res.solve_info["max_scenario_radius"] < 1.0


def test_scenario_provenance_and_membership():
    law = TruncatedLaw(synthetic_law(1e-4, np.random.default_rng(0)), 0.98)
    scen = draw_scenarios(law, 50, np.random.default_rng(2), seed_info=[7, 0, 0])
    assert scen.provenance == {"law": law.base.fingerprint, "credibility": 0.98, "m": 50, "seed": [7, 0, 0]}
    assert np.all(law.contains(scen.parameters))


# --- tangent of the matrix inverse --------------------------------------------------

def test_tangent_examples():
    x_bar = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(linearized_inverse(x_bar)(x_bar), np.linalg.inv(x_bar), atol=1e-14)
    t = linearized_inverse([[2.0]])
    assert t(np.array([[2.0]]))[0, 0] == pytest.approx(0.5)
    assert t(np.array([[1.0]]))[0, 0] == pytest.approx(1 - 1 / 4)


def test_tangent_rejects_singular_point():
    with pytest.raises(ValueError):
        linearized_inverse(np.diag([1.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 4))
def test_tangent_minorizes_the_inverse(seed, n):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.standard_normal((2, n, n))
    x_bar = g1 @ g1.T + 0.1 * np.eye(n)
    x = g2 @ g2.T + 0.1 * np.eye(n)
    gap = np.linalg.inv(x) - linearized_inverse(x_bar)(x)
    assert np.linalg.eigvalsh(0.5 * (gap + gap.T))[0] >= -1e-10 * max(1.0, np.abs(gap).max())


# --- improvement steps ------------------------------------------------------------

def test_first_improvement_does_not_exceed_bound():
    law = TruncatedLaw(synthetic_law(1e-5, np.random.default_rng(0)), 0.98)
    scen = draw_scenarios(law, 10, np.random.default_rng(3))
    _, weights = dean_linear_system()
    init = synth_init(scen, weights)
    step = synth_improve_step(scen, weights, np.linalg.inv(init.y))
    assert step.objective <= init.ub + 1e-6


def test_duplicate_scenarios_match_single():
    one = synth_iterate(_scalar_set(0.5), UNIT)
    many = synth_iterate(_scalar_set(0.5, 0.5, 0.5), UNIT)
    np.testing.assert_allclose(many.gain, one.gain, atol=1e-5)
    assert many.objective_trace[-1] == pytest.approx(one.objective_trace[-1], rel=1e-5)


def test_iterate_single_scenario_reaches_lqr_cost():
    p, k = _dare_reference(a=0.9, b=0.5)
    res = synth_iterate(_scalar_set(0.9, b=0.5), UNIT)
    tr = np.array(res.objective_trace)
    assert np.all(tr[1:] <= tr[:-1] * (1 + 1e-6))
    assert tr[-1] == pytest.approx(p, rel=1e-3)
    np.testing.assert_allclose(res.gain, k, atol=1e-3)


def test_iterate_without_steps_returns_init():
    res = synth_iterate(_scalar_set(0.5, -0.3), UNIT, StopCriterion(max_iter=0))
    np.testing.assert_array_equal(res.gain, res.init.gain)
    assert res.objective_trace == [res.init.ub]


def test_scenario_costs_are_majorized():
    law = TruncatedLaw(synthetic_law(1e-5, np.random.default_rng(4)), 0.98)
    scen = draw_scenarios(law, 8, np.random.default_rng(5))
    _, weights = dean_linear_system()
    res = synth_iterate(scen, weights, StopCriterion(max_iter=5))
    assert not res.breakdown
    for sys, x in zip(scen.systems, res.xs):
        bound = np.trace(x @ weights.sigma_w)
        assert lyapunov_cost(sys, res.gain, weights) <= bound + 1e-5 * (1 + bound)


# --- validation -------------------------------------------------------------------

def test_validate_degenerate_laws():
    stable = TruncatedLaw(GaussianParameterLaw.degenerate([[0.5]], [[1.0]]), 0.98)
    rep = validate([[0.0]], stable, PROFILE, np.random.default_rng(0))
    assert rep.empirical_stability == 1.0 and rep.passed
    assert rep.m_validation == hoeffding_sample_bound(0.01, 0.001)
    unstable = TruncatedLaw(GaussianParameterLaw.degenerate([[1.5]], [[1.0]]), 0.98)
    rep = validate([[0.0]], unstable, PROFILE, np.random.default_rng(0))
    assert rep.empirical_stability == 0.0 and not rep.passed


def test_validate_binomial_concentration():
    law = TruncatedLaw(GaussianParameterLaw(np.array([[1.0, 1.0]]), np.diag([0.3, 0.3])), 0.98)
    _, k = _dare_reference(1.0, 1.0)
    a = validate(k, law, PROFILE, np.random.default_rng(10))
    b = validate(k, law, PROFILE, np.random.default_rng(11))
    phi = a.empirical_stability
    assert 0.0 < phi < 1.0
    assert abs(phi - b.empirical_stability) <= 3 * math.sqrt(phi * (1 - phi) / a.m_validation)


def test_validate_rejects_short_sample():
    law = TruncatedLaw(GaussianParameterLaw.degenerate([[0.5]], [[1.0]]), 0.98)
    with pytest.raises(ValueError):
        validate([[0.0]], law, PROFILE, np.random.default_rng(0), m_validation=10)


# --- the certified loop -------------------------------------------------------------

def test_algorithm1_degenerate_law_reduces_to_lqr():
    law = TruncatedLaw(GaussianParameterLaw.degenerate([[0.5]], [[1.0]]), 0.98)
    ctrl = algorithm1(law, PROFILE, UNIT, seed=0, m_scenarios=3)
    _, k = _dare_reference()
    np.testing.assert_allclose(ctrl.gain, k, atol=1e-3)
    assert ctrl.attempts == 1
    assert ctrl.empirical_stability == 1.0


def test_algorithm1_certificate_arithmetic():
    law = TruncatedLaw(GaussianParameterLaw.degenerate(0.5 * np.eye(2), np.eye(2)), 0.98)
    ctrl = algorithm1(law, PROFILE, CostWeights(np.eye(2), np.eye(2), np.eye(2)), seed=1)
    assert ctrl.m_scenarios == scenario_sample_bound(0.02, 0.20, n_k_for(2, 2))
    assert ctrl.m_validation == hoeffding_sample_bound(0.01, 0.001)
    assert ctrl.guaranteed_stability_prob == 0.98 - 0.02 - 0.01
    assert ctrl.confidence == 1 - 0.001
    assert ctrl.empirical_stability >= 1 - PROFILE.eps


def test_algorithm1_unstabilizable_law():
    law = TruncatedLaw(GaussianParameterLaw(np.array([[1.5, 0.0]]), np.diag([1e-8, 1e-12])), 0.98)
    with pytest.raises(InfeasibleInit):
        algorithm1(law, PROFILE, UNIT, seed=0, m_scenarios=5)


def test_algorithm1_restarts_exhausted():
    law = GaussianParameterLaw(np.array([[1.0, 1.0]]), np.diag([0.3, 0.3]))
    profile = RiskProfile(0.9, 0.02, 0.2, 0.05, 0.01)
    with pytest.raises(RestartsExhausted) as info:
        algorithm1(TruncatedLaw(law, 0.9), profile, UNIT, seed=0, max_restarts=1, m_scenarios=1)
    assert [a["outcome"] for a in info.value.attempts] == ["rejected", "rejected"]


def test_algorithm1_rejects_mismatched_credibility():
    law = TruncatedLaw(GaussianParameterLaw.degenerate([[0.5]], [[1.0]]), 0.9)
    with pytest.raises(ValueError):
        algorithm1(law, PROFILE, UNIT, seed=0)


def test_attempt_streams_are_disjoint():
    synth, val = attempt_seeds(3, 0)
    assert synth.spawn_key != val.spawn_key
    a = np.random.default_rng(synth).random(4)
    b = np.random.default_rng(val).random(4)
    assert not np.any(a == b)
    assert attempt_seeds(3, 1)[0].spawn_key == (1, 0)


def test_controller_round_trip():
    law = TruncatedLaw(GaussianParameterLaw.degenerate([[0.5]], [[1.0]]), 0.98)
    ctrl = algorithm1(law, PROFILE, UNIT, seed=0, m_scenarios=3)
    doc = ctrl.to_dict()
    assert doc["schema_version"] == "v1"
    back = CertifiedController.from_dict(doc)
    np.testing.assert_array_equal(back.gain, ctrl.gain)
    assert back.to_dict() == doc


# --- worst-case baseline over the credible ellipsoid ---------------------------------

def test_worst_case_degenerate_law_matches_lqr():
    p, k = _dare_reference()
    res = synth_worst_case(TruncatedLaw(GaussianParameterLaw.degenerate([[0.5]], [[1.0]]), 0.95), UNIT)
    assert res.ub == pytest.approx(p, rel=1e-4)
    np.testing.assert_allclose(res.gain, k, atol=1e-3)


def test_worst_case_gain_stabilizes_ellipsoid_boundary():
    law = TruncatedLaw(synthetic_law(1e-6, np.random.default_rng(0)), 0.95)
    _, weights = dean_linear_system()
    res = synth_worst_case(law, weights)
    scen = boundary_scenarios(law, 500, np.random.default_rng(1))
    assert np.all(scen.closed_loop_radii(res.gain) < 1.0)


def test_worst_case_infeasible_for_wide_law():
    law = TruncatedLaw(synthetic_law(1e-3, np.random.default_rng(0)), 0.95)
    _, weights = dean_linear_system()
    with pytest.raises(InfeasibleInit):
        synth_worst_case(law, weights)
