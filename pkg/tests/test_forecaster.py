import pytest
import numpy as np
from gfcast.config import CONFIGS_DIR
from gfcast.exceptions import ConfigError, OverlapRefusal
from gfcast.mapping import build_mapper
from gfcast.models import AnalysisConfig, ForecastConfig, FutureWindow, MapperSpec, OverlapReport, ScenarioSpec, WindowSpec
from gfcast.services.forecaster import (
    FutureGeometry,
    enforce_overlap,
    forecast_att_f,
    impute_modifiers,
    scenario_strata,
)
from gfcast.utils.io_utils import load_model


def test_future_geometry_ranges(k0_spec):
    """Test the outcome and treatment times of a forward window."""
    geometry = FutureGeometry(FutureWindow(F=5), k0_spec, 60)
    assert list(geometry.outcome_times) == [65]
    assert list(geometry.treatment_times) == [65]
    assert geometry.fixed_time == 65
    assert geometry.needs_imputation and not geometry.backtest


def test_future_geometry_rejects_bad_windows(k0_spec):
    """Test the T_F range, the gap schedule length and the origin range."""
    with pytest.raises(ConfigError):
        FutureGeometry(FutureWindow(F=5, T_F=1), k0_spec, 60)
    with pytest.raises(ConfigError):
        FutureGeometry(FutureWindow(F=5, schedule=[0, 1]), k0_spec, 60)
    with pytest.raises(ConfigError):
        FutureGeometry(FutureWindow(F=5, origin=61), k0_spec, 60)


def test_gap_schedule_and_backtest(k0_spec):
    """Test the supplied gap treatments and a back-test origin inside the panel."""
    geometry = FutureGeometry(FutureWindow(F=5, schedule=[0, 1, 1, 0]), k0_spec, 60)
    assert [geometry.gap_action(tau) for tau in range(61, 66)] == [0, 1, 1, 0, 0]
    backtest = FutureGeometry(FutureWindow(F=5, origin=40), k0_spec, 60)
    assert backtest.backtest and not backtest.needs_imputation
    assert list(backtest.outcome_times) == [45]


def test_imputation_is_thread_independent(tdc_panel, k0_spec):
    """Test that imputed draws do not depend on the worker count."""
    future = FutureWindow(F=3)
    single = impute_modifiers(tdc_panel, k0_spec, future, n_draws=4, seed=1, min_cell=1, threads=1)
    multi = impute_modifiers(tdc_panel, k0_spec, future, n_draws=4, seed=1, min_cell=1, threads=3)
    assert single == multi
    assert [draw.draw for draw in single] == [0, 1, 2, 3]
    completed = [draw for draw in single if draw.aborted is None]
    assert completed, "at least one draw should complete"
    history = completed[0].histories[0]
    assert history.time == 63
    assert history.provenance == ("imputed", "imputed")
    assert len(completed[0].histories) == tdc_panel.n_units


def test_backtest_uses_observed_histories(tdc_panel, k0_spec):
    """Test that a back-test with observed histories returns a single draw."""
    draws = impute_modifiers(tdc_panel, k0_spec, FutureWindow(F=5, origin=40), n_draws=50, seed=1, min_cell=1)
    assert len(draws) == 1
    history = draws[0].histories[0]
    assert history.provenance == ("observed", "observed")
    assert history.r_bar == (int(tdc_panel.x_joint[0, 44]), int(tdc_panel.y[0, 43]))


def test_scenario_strata(toy_schema, k0_spec):
    """Test conversion of explicit R̄ values to codes."""
    scenario = ScenarioSpec(rule="explicit-R*", values=[[1, 0]])
    assert scenario_strata(scenario, toy_schema, k0_spec) == {(1, 0)}
    assert scenario_strata(ScenarioSpec(), toy_schema, k0_spec) == set()
    with pytest.raises(ConfigError):
        scenario_strata(ScenarioSpec(rule="explicit-R*", values=[[1]]), toy_schema, k0_spec)
    with pytest.raises(ConfigError):
        scenario_strata(ScenarioSpec(rule="explicit-R*", values=[[5, 0]]), toy_schema, k0_spec)


def test_enforce_overlap():
    """Test refusal above the threshold and the force override."""
    overlap = OverlapReport(n_checked=10, n_violations=2, violation_fraction=0.2, off_support=["2|0"])
    with pytest.raises(OverlapRefusal):
        enforce_overlap(overlap, 0.1, force=False)
    enforce_overlap(overlap, 0.1, force=True)
    enforce_overlap(overlap, 0.5, force=False)


def test_small_forecast(tdc_panel, k0_spec):
    """Test a fixed-time ATT_F forecast and its thread independence."""
    mapper = build_mapper(MapperSpec(), k0_spec)
    config = AnalysisConfig(window=k0_spec, min_cell=1, jackknife_groups=2, seed=3)
    forecast = ForecastConfig(future=FutureWindow(F=3), n_draws=20, seed=5)
    report = forecast_att_f(tdc_panel, k0_spec, mapper, config, forecast, threads=1)
    assert report.estimand == "ATT_F"
    assert len(report.draws) == 20
    assert report.overlap.violation_fraction == 0.0
    assert report.mode["imputation"] == "sampled"
    assert all(c.observed is None and c.time == 63 for c in report.contributions)
    assert report == forecast_att_f(tdc_panel, k0_spec, mapper, config, forecast, threads=2)


def test_forecast_averages_draw_estimates(tdc_panel, k0_spec):
    """Test that ATT_F averages the per-draw estimates."""
    mapper = build_mapper(MapperSpec(), k0_spec)
    config = AnalysisConfig(window=k0_spec, min_cell=1, jackknife_groups=2, seed=3)
    forecast = ForecastConfig(future=FutureWindow(F=3), n_draws=20, seed=5)
    report = forecast_att_f(tdc_panel, k0_spec, mapper, config, forecast, threads=1)
    done = [d for d in report.draws if d.value is not None]
    assert report.value == pytest.approx(np.mean([d.value for d in done]), abs=1e-12)
    assert report.total == pytest.approx(sum(d.value * d.n_pairs for d in done) / len(done), abs=1e-9)
    assert report.n_treated == sum(d.n_pairs for d in done)
    assert sum(c.weight for c in report.contributions) == pytest.approx(report.n_treated / len(done))


def test_unseen_stratum_is_refused(drift_panel, k0_spec):
    """Test that an explicit R̄ outside the observed support refuses the forecast."""
    mapper = build_mapper(MapperSpec(), k0_spec)
    forecast = load_model(CONFIGS_DIR / "scenarios" / "explicit-off-support.json", ForecastConfig)
    config = AnalysisConfig(window=k0_spec, min_cell=1, jackknife_groups=2)
    with pytest.raises(OverlapRefusal) as info:
        forecast_att_f(drift_panel, k0_spec, mapper, config, forecast.model_copy(update={"n_draws": 5}))
    assert info.value.exit_code == 4
    assert "2|0" in info.value.message
