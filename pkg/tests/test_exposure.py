import pytest
from gfcast.exceptions import PolicyError, PolicySpecError
from gfcast.models import AnalysisConfig, ExposurePolicy, ForecastConfig, FutureWindow, WindowSpec
from gfcast.services.exposure import estimate_aee, estimate_erf, forecast_aee_f, forecast_exposure_law

SPEC = WindowSpec()


def erf_config(**kwargs) -> AnalysisConfig:
    return AnalysisConfig(window=SPEC, erf_conditioning="r", min_cell=1, jackknife_groups=4, seed=5, **kwargs)


def point_mass(value: float) -> ExposurePolicy:
    return ExposurePolicy(kind="point-mass", threshold=value)


def test_erf_has_one_cell_per_vector(exposure_panel):
    """Test that the ERF covers every exposure level of a K=0 window."""
    erf = estimate_erf(exposure_panel, SPEC, erf_config(), 3, 40)
    assert [cell.vector for cell in erf.cells] == [[0.5], [1.0], [1.5]]
    assert all(cell.estimable and cell.count > 0 for cell in erf.cells)
    assert erf.mean((0,)) == erf.cells[0].mean


def test_aee_is_linear_in_the_policy(exposure_panel):
    """Test that a mixture's AEE is the weighted sum of its components' AEEs."""
    config = erf_config()
    low = estimate_aee(exposure_panel, SPEC, point_mass(0.5), config)
    high = estimate_aee(exposure_panel, SPEC, point_mass(1.5), config)
    mixture = ExposurePolicy(kind="mixture", components=[point_mass(0.5), point_mass(1.5)], weights=[0.3, 0.7])
    mixed = estimate_aee(exposure_panel, SPEC, mixture, config)
    assert not (low.dropped or high.dropped or mixed.dropped)
    assert abs(mixed.value - (0.3 * low.value + 0.7 * high.value)) <= 1e-10


def test_natural_policy_contrast_is_small(exposure_panel):
    """Test that replaying the natural exposure law leaves a small in-sample contrast."""
    config = erf_config()
    natural = estimate_aee(exposure_panel, SPEC, ExposurePolicy(kind="natural"), config)
    assert natural.mode["policy"] == "natural"
    assert abs(natural.value) < 0.1


def test_policy_errors(exposure_panel):
    """Test dynamic policies in sample and off-grid point masses."""
    dynamic = ExposurePolicy(kind="dynamic-conditional", rules=[{"when": {"y": [[1]]}, "law": [1.0, 0.0, 0.0]}])
    with pytest.raises(PolicyError):
        estimate_aee(exposure_panel, SPEC, dynamic, erf_config())
    with pytest.raises(PolicySpecError):
        estimate_aee(exposure_panel, SPEC, point_mass(0.7), erf_config())


def test_forecast_exposure_law(exposure_panel):
    """Test that forecast window laws are probability laws over grid values."""
    forecasts = forecast_exposure_law(exposure_panel, SPEC, FutureWindow(F=2), n_draws=5, seed=1,
                                      config=erf_config())
    assert len(forecasts) == exposure_panel.n_units
    for forecast in forecasts:
        assert forecast.time == exposure_panel.horizon + 2
        assert sum(forecast.law.values()) == pytest.approx(1.0, abs=1e-12)
        assert set(forecast.law) <= {"0.5", "1", "1.5"}


def test_natural_aee_f_is_zero(exposure_panel):
    """Test that the natural policy has an exactly zero future contrast."""
    forecast = ForecastConfig(future=FutureWindow(F=2), n_draws=5, seed=1)
    report = forecast_aee_f(exposure_panel, SPEC, erf_config(), forecast, ExposurePolicy(kind="natural"))
    assert report.estimand == "AEE_F"
    assert report.value == 0.0
    assert all(c.contrast == 0.0 for c in report.contributions)


def test_aee_f_averages_draw_estimates(exposure_panel):
    """Test that AEE_F averages the per-draw estimates."""
    forecast = ForecastConfig(future=FutureWindow(F=2), n_draws=10, seed=2)
    report = forecast_aee_f(exposure_panel, SPEC, erf_config(), forecast, point_mass(1.0), force=True)
    done = [d for d in report.draws if d.value is not None]
    assert report.value == pytest.approx(sum(d.value for d in done) / len(done), abs=1e-12)
    assert report.n_treated == sum(d.n_pairs for d in done)
