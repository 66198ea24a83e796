import math
import pytest
from pydantic import ValidationError
from gfcast.config import resolve_threads
from gfcast.models import (
    AnalysisConfig,
    ColumnGrid,
    EstimateReport,
    ExposurePolicy,
    FutureWindow,
    MapperSpec,
    OracleResult,
    PanelSchema,
    ScenarioSpec,
    UnitSet,
    WindowSpec,
)


def test_window_defaults():
    """Test that L, L_x and L_y default to B, K and K+1."""
    spec = WindowSpec(B=1, K=2)
    assert (spec.L, spec.L_x, spec.L_y) == (1, 2, 3), spec
    assert spec.first_query_time == 5, spec.first_query_time


def test_window_rejects_lag_outside_window():
    """Test that L outside [B, B+K] is rejected."""
    with pytest.raises(ValidationError):
        WindowSpec(B=0, K=1, L=2)
    with pytest.raises(ValidationError):
        WindowSpec(K=2, L_y=2)


def test_window_times():
    """Test the oldest-first time ranges of a K=2 window."""
    spec = WindowSpec(B=0, K=2)
    assert list(spec.window_times(10)) == [8, 9, 10]
    assert list(spec.r_covariate_times(10)) == [8]
    assert list(spec.r_outcome_times(10)) == [7]
    assert list(spec.v_covariate_times(10)) == [9, 10]
    assert list(spec.v_outcome_times(10)) == [8, 9]


def test_window_start_outcome_option():
    """Test that 'window-start' moves y_H from V̄ into R̄."""
    spec = WindowSpec(B=0, K=2, r_outcome_end="window-start")
    assert list(spec.r_outcome_times(10)) == [7, 8]
    assert list(spec.v_outcome_times(10)) == [9]


def test_column_grid_checks():
    """Test duplicate values, numeric matching and bin edges of a grid."""
    with pytest.raises(ValidationError):
        ColumnGrid(name="x", values=[0, 0])
    grid = ColumnGrid(name="y", values=[0, 2, 6])
    assert grid.code_of(2.0) == 1
    with pytest.raises(ValueError):
        grid.code_of(3)
    with pytest.raises(ValidationError):
        ColumnGrid(name="y", values=[0, 1], bin_edges=[0.0, 0.5])


def test_schema_requires_binary_treatment():
    """Test that the treatment grid must be [0, 1]."""
    with pytest.raises(ValidationError):
        PanelSchema(treatment=ColumnGrid(name="z", values=[0, 1, 2]),
                    outcome=ColumnGrid(name="y", values=[0, 1]),
                    covariates=[ColumnGrid(name="x", values=[0, 1])])


def test_policy_validation():
    """Test the per-kind requirements of exposure policies."""
    with pytest.raises(ValidationError):
        ExposurePolicy(kind="point-mass")
    with pytest.raises(ValidationError):
        ExposurePolicy(kind="mixture", components=[ExposurePolicy(kind="natural")], weights=[0.5])
    with pytest.raises(ValidationError):
        ExposurePolicy(kind="explicit-table", table=[0.5, 0.6])
    policy = ExposurePolicy(kind="mixture", components=[ExposurePolicy(kind="natural")], weights=[1.0])
    assert policy.components[0].kind == "natural"


def test_scenario_and_future_validation():
    """Test explicit scenarios need values and gap schedules are binary."""
    with pytest.raises(ValidationError):
        ScenarioSpec(rule="explicit-R*")
    with pytest.raises(ValidationError):
        FutureWindow(F=3, schedule=[0, 2])
    with pytest.raises(ValidationError):
        FutureWindow(F=0)


def test_report_rejects_non_finite_value():
    """Test that a NaN estimate cannot be reported."""
    with pytest.raises(ValidationError):
        EstimateReport(estimand="ATT", value=math.nan, n_treated=0, n_candidates=0, total=0.0)


def test_enumeration_result_has_no_mc_error():
    """Test that exact oracle results carry zero Monte Carlo error."""
    with pytest.raises(ValidationError):
        OracleResult(estimand="ATT", value=0.1, mc_standard_error=0.01, method="enumeration")


def test_unit_set_membership_rules():
    """Test that observed and future unit sets check their times against T."""
    with pytest.raises(ValidationError):
        UnitSet(kind="future-all", horizon=10, members=[(0, 10)])
    with pytest.raises(ValidationError):
        UnitSet(kind="observed-all", horizon=10, members=[(0, 3), (0, 3)])
    units = UnitSet(kind="observed-treated", horizon=10, members=[(0, 3), (1, 4)])
    assert (1, 4) in units and len(units) == 2


def test_default_conditioning_follows_mapper():
    """Test that one-day mappers condition on R̄ and multi-day ones on [R̄, V̄]."""
    assert AnalysisConfig().resolved_conditioning() == "r"
    assert AnalysisConfig(mapper=MapperSpec(kind="any-day")).resolved_conditioning() == "rv"
    assert AnalysisConfig(conditioning="rv").resolved_conditioning() == "rv"


def test_thread_resolution(monkeypatch):
    """Test flag, then GFC_THREADS, then 1."""
    monkeypatch.delenv("GFC_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("GFC_THREADS", "4")
    assert resolve_threads() == 4
    assert resolve_threads(2) == 2
