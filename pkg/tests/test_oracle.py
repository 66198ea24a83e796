import pytest
from gfcast.exceptions import DgpError, OracleError
from gfcast.mapping import build_mapper
from gfcast.models import EstimandDescriptor, MapperSpec, WindowSpec
from gfcast.panel import build_unit_sets
from gfcast.services.simulator import load_dgp, simulate
from gfcast.services.oracle import (
    Schedule,
    StructuralOracle,
    UnitProfile,
    anchored_profile,
    natural_window_law,
    oracle_estimand,
    oracle_exposure_response,
    oracle_potential_outcome,
    transport_law_distance,
)

START = UnitProfile(time=5, x_prev=0, a_prev=1, y_prev=0)


def test_enumerated_law_has_unit_mass(tdc_dgp):
    """Test that the enumerated joint law sums to one."""
    oracle = StructuralOracle(tdc_dgp)
    law = oracle.enumerate(START.time, START.start_states(), Schedule(), 9, record=(("x", 6), ("a", 7)))
    assert sum(law.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(len(state[3]) == 2 for state in law)


def test_monte_carlo_agrees_with_enumeration(tdc_dgp):
    """Test the Monte Carlo fallback against the exact value."""
    exact = StructuralOracle(tdc_dgp).expectation(START.time, START.start_states(), Schedule(), 10)
    sampled = StructuralOracle(tdc_dgp, cap=0, replications=20_000, seed=3).expectation(
        START.time, START.start_states(), Schedule(), 10)
    assert exact.method == "enumeration" and sampled.method == "monte-carlo"
    assert sampled.mc_standard_error > 0
    assert abs(exact.value - sampled.value) <= 4 * sampled.mc_standard_error, (exact, sampled)


def test_cap_without_monte_carlo(tdc_dgp):
    """Test that exceeding the cap raises when Monte Carlo is disabled."""
    oracle = StructuralOracle(tdc_dgp, cap=0, monte_carlo=False)
    with pytest.raises(OracleError):
        oracle.expectation(START.time, START.start_states(), Schedule(), 6)
    with pytest.raises(OracleError):
        oracle.enumerate(START.time, START.start_states(), Schedule(), 6)


def test_forced_one_step_outcome(tdc_dgp):
    """Test E[Y_t(d)] against the outcome table when K=0 and x_t is known."""
    spec = WindowSpec()
    mapper = build_mapper(MapperSpec(), spec)
    profile = UnitProfile(time=10, x=1, x_prev=0, a_prev=0, y_prev=1)
    treated = oracle_potential_outcome(tdc_dgp, mapper, spec, profile, 10, 1)
    control = oracle_potential_outcome(tdc_dgp, mapper, spec, profile, 10, 0)
    assert treated.value == pytest.approx(0.65)
    assert control.value == pytest.approx(0.8)


def test_null_effect_has_equal_potential_outcomes(null_dgp):
    """Test that Y(1) and Y(0) coincide when the outcome ignores treatment."""
    spec = WindowSpec(K=2)
    mapper = build_mapper(MapperSpec(), spec)
    profile = UnitProfile(time=8, x=1, x_prev=0, a_prev=0, y_prev=0)
    treated = oracle_potential_outcome(null_dgp, mapper, spec, profile, 10, 1)
    control = oracle_potential_outcome(null_dgp, mapper, spec, profile, 10, 0)
    weighted = oracle_potential_outcome(null_dgp, mapper, spec, profile, 10, 0, control_convention="weighted")
    assert treated.value == pytest.approx(control.value, abs=1e-12)
    assert weighted.value == pytest.approx(control.value, abs=1e-12)


def test_conditional_att_is_zero_under_null(null_dgp, null_panel):
    """Test the conditional-form oracle ATT on the null-effect model."""
    spec = WindowSpec()
    mapper = build_mapper(MapperSpec(), spec)
    _, treated = build_unit_sets(null_panel, spec, mapper)
    members = [(i, t) for i, t in treated.members if t >= 2][:10]
    descriptor = EstimandDescriptor(kind="ATT", members=members, form="conditional")
    result = oracle_estimand(null_dgp, descriptor, null_panel, spec, mapper)
    assert result.value == pytest.approx(0.0, abs=1e-12)


def test_outcome_law_transports(tdc_dgp):
    """Test that Y(z̄) given R̄ has the same law in past and future populations."""
    distance = transport_law_distance(tdc_dgp, WindowSpec(), "outcome", past_time=6,
                                      future_start=UnitProfile(time=30, x_prev=1, a_prev=1, y_prev=1),
                                      future_time=34, vector=(1,))
    assert distance <= 1e-10


def test_natural_window_law(tdc_dgp, tdc_panel):
    """Test that the natural-course window law is a probability law over K+1 vectors."""
    spec = WindowSpec(K=2)
    profile = anchored_profile(tdc_panel, tdc_dgp, spec, 0, 20)
    law = natural_window_law(StructuralOracle(tdc_dgp), spec, profile, 20)
    assert sum(law.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(len(vector) == 3 for vector in law)


def test_estimand_preconditions(tdc_dgp, tdc_panel):
    """Test the missing-mapper and early-anchor checks."""
    spec = WindowSpec()
    with pytest.raises(DgpError):
        oracle_estimand(tdc_dgp, EstimandDescriptor(kind="ATT", members=[(0, 10)]), tdc_panel, spec)
    with pytest.raises(OracleError):
        anchored_profile(tdc_panel, tdc_dgp, spec, 0, 1)


def test_flat_exposure_response():
    """Test that the exposure-response curve is flat when exposure never reaches the outcome."""
    dgp = load_dgp("flat-erf")
    spec = WindowSpec(K=1)
    values = [oracle_exposure_response(dgp, spec, START, 8, vector).value for vector in [(0, 0), (2, 2), (1, 0)]]
    assert max(values) - min(values) <= 1e-12, values
    with pytest.raises(OracleError):
        oracle_exposure_response(dgp, spec, START, 8, (0,))


def test_second_order_enumeration():
    """Test the oracle on a model with two outcome and covariate lags."""
    dgp = load_dgp("outcome-lag2")
    start = UnitProfile(time=5, x_prev=(1, 0), a_prev=0, y_prev=(1, 1))
    law = StructuralOracle(dgp).enumerate(start.time, start.start_states(), Schedule(), 8)
    assert sum(law.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(len(xh) == 2 and len(ah) == 1 and len(yh) == 2 for xh, ah, yh, _ in law)
    exact = StructuralOracle(dgp).expectation(start.time, start.start_states(), Schedule(), 9)
    sampled = StructuralOracle(dgp, cap=0, replications=20_000, seed=4).expectation(
        start.time, start.start_states(), Schedule(), 9)
    assert abs(exact.value - sampled.value) <= 4 * sampled.mc_standard_error, (exact, sampled)


def test_second_order_forced_outcome():
    """Test E[Y_t(d)] against the outcome table indexed by both outcome lags."""
    dgp = load_dgp("outcome-lag2")
    spec = WindowSpec()
    mapper = build_mapper(MapperSpec(), spec)
    profile = UnitProfile(time=10, x=1, x_prev=(0, 0), a_prev=0, y_prev=(1, 0))
    assert oracle_potential_outcome(dgp, mapper, spec, profile, 10, 1).value == pytest.approx(0.75)
    assert oracle_potential_outcome(dgp, mapper, spec, profile, 10, 0).value == pytest.approx(0.6)


def test_anchored_profile_reads_all_lags():
    """Test that the panel-anchored state carries every lag the model declares."""
    dgp = load_dgp("outcome-lag2")
    panel = simulate(dgp, 3, 20, seed=1)
    profile = anchored_profile(panel, dgp, WindowSpec(), 0, 10)
    assert profile.x_prev == (int(panel.x_joint[0, 8]), int(panel.x_joint[0, 7]))
    assert profile.y_prev == (int(panel.y[0, 8]), int(panel.y[0, 7]))
    with pytest.raises(OracleError):
        anchored_profile(panel, dgp, WindowSpec(), 0, 2)
