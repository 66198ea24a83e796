import pytest
import numpy as np
from gfcast.exceptions import AllUnitsDroppedError, BelowMinCellError
from gfcast.mapping import build_mapper
from gfcast.models import AnalysisConfig, MapperSpec, WindowSpec
from gfcast.services.estimator import (
    estimate_adjusted_mean,
    estimate_att,
    g_formula_mean,
    jackknife_se,
    unit_groups,
)


def toy_config(method: str, **kwargs) -> AnalysisConfig:
    return AnalysisConfig(window=WindowSpec(), method=method, min_cell=1, jackknife_groups=2, seed=1, **kwargs)


@pytest.fixture
def one_day(k0_spec):
    return build_mapper(MapperSpec(), k0_spec)


def test_toy_att_by_adjustment(toy_panel, k0_spec, one_day):
    """Test the hand-computed ATT, total and jackknife SE of the toy panel."""
    report = estimate_att(toy_panel, k0_spec, one_day, toy_config("adjustment"))
    assert report.value == 0.5, report.value
    assert report.total == 1.0
    assert report.se == pytest.approx(0.5)
    assert report.n_treated == 2 and report.n_candidates == 2
    assert [(c.unit, c.time, c.contrast) for c in report.contributions] == [("u1", 2, 0.0), ("u2", 3, 1.0)]
    assert report.mode["method"] == "adjustment"


def test_toy_g_formula_matches_adjustment(toy_panel, k0_spec, one_day):
    """Test that with K=0 the g-formula reduces to adjustment on R̄."""
    adjusted = estimate_att(toy_panel, k0_spec, one_day, toy_config("adjustment"))
    g_formula = estimate_att(toy_panel, k0_spec, one_day, toy_config("g-formula"))
    assert g_formula.value == adjusted.value
    assert g_formula.mc_se == 0.0


def test_adjusted_means(toy_panel, k0_spec, one_day):
    """Test the stratum means of the two treated rows."""
    assert estimate_adjusted_mean(toy_panel, k0_spec, one_day, "r", 0, 2, min_cell=1) == 1.0
    assert estimate_adjusted_mean(toy_panel, k0_spec, one_day, "r", 1, 3, min_cell=1) == 0.0
    assert g_formula_mean(toy_panel, k0_spec, one_day, 0, 2, 0, toy_config("g-formula")) == (1.0, 0.0)
    with pytest.raises(BelowMinCellError):
        estimate_adjusted_mean(toy_panel, k0_spec, one_day, "r", 0, 2, min_cell=3)
    with pytest.raises(BelowMinCellError):
        estimate_adjusted_mean(toy_panel, k0_spec, one_day, "r", 0, 2)


def test_all_units_dropped(toy_panel, k0_spec, one_day):
    """Test that sparse strata under a large min_cell drop every treated unit."""
    config = toy_config("adjustment").model_copy(update={"min_cell": 3})
    with pytest.raises(AllUnitsDroppedError) as info:
        estimate_att(toy_panel, k0_spec, one_day, config)
    assert info.value.details["reason"] == "below-min-cell"


def test_jackknife_helpers():
    """Test the jackknife SE and the label-ranked groups."""
    assert jackknife_se([1.0, 0.0]) == pytest.approx(0.5)
    assert jackknife_se([1.0, None]) == 0.0
    assert unit_groups(["u1", "u2", "u3", "u4", "u5"], 2).tolist() == [0, 1, 0, 1, 0]
    assert unit_groups(["c", "a", "b"], 2).tolist() == [0, 0, 1]
    assert unit_groups(["u1", "u2"], 20).tolist() == [0, 1]


def test_k0_methods_agree_bitwise(tdc_panel, k0_spec, one_day):
    """Test bitwise agreement of adjustment and g-formula on a simulated panel with K=0."""
    config = AnalysisConfig(window=k0_spec, min_cell=1, jackknife_groups=4, seed=2)
    adjusted = estimate_att(tdc_panel, k0_spec, one_day, config.model_copy(update={"method": "adjustment"}))
    g_formula = estimate_att(tdc_panel, k0_spec, one_day, config)
    assert adjusted.value == g_formula.value
    assert adjusted.se == g_formula.se
    assert [c.time for c in adjusted.contributions] == [c.time for c in g_formula.contributions]


def test_contributions_respect_history(tdc_panel):
    """Test that no contribution is imputed before the first full history."""
    spec = WindowSpec(K=1)
    mapper = build_mapper(MapperSpec(), spec)
    report = estimate_att(tdc_panel, spec, mapper, AnalysisConfig(window=spec, min_cell=1, jackknife_groups=2))
    assert all(c.time >= spec.first_query_time for c in report.contributions)
    assert all(d.reason == "history-underflow" for d in report.dropped if d.time < spec.first_query_time)
    assert report.n_treated + len(report.dropped) == report.n_candidates
    assert np.isfinite(report.value)


def test_thread_count_does_not_change_estimate(tdc_panel, k0_spec, one_day):
    """Test that one and three workers give the same report."""
    config = AnalysisConfig(window=k0_spec, min_cell=1, jackknife_groups=4)
    single = estimate_att(tdc_panel, k0_spec, one_day, config, threads=1)
    multi = estimate_att(tdc_panel, k0_spec, one_day, config, threads=3)
    assert single == multi


PERMUTATION = [3, 0, 7, 1, 12, 5, 19, 2, 8, 4, 11, 6, 9, 15, 10, 13, 14, 16, 18, 17]


def k1_report(panel, method: str):
    spec = WindowSpec(K=1)
    mapper = build_mapper(MapperSpec(), spec)
    config = AnalysisConfig(window=spec, method=method, min_cell=1, jackknife_groups=5, seed=2)
    return estimate_att(panel, spec, mapper, config)


def by_label(report) -> list:
    return sorted(report.contributions, key=lambda c: (c.unit, c.time))


@pytest.mark.parametrize("method", ["adjustment", "g-formula"])
def test_unit_order_does_not_change_estimate(tdc_panel, method):
    """Test that permuting the panel rows leaves the estimate, SE and contributions unchanged."""
    base = k1_report(tdc_panel, method)
    permuted = k1_report(tdc_panel.take_units(PERMUTATION), method)
    assert permuted.value == pytest.approx(base.value, rel=1e-12, abs=1e-12)
    assert permuted.se == pytest.approx(base.se, rel=1e-9, abs=1e-12)
    left, right = by_label(base), by_label(permuted)
    assert [(c.unit, c.time) for c in left] == [(c.unit, c.time) for c in right]
    assert np.allclose([c.observed for c in left], [c.observed for c in right])
    assert np.allclose([c.imputed for c in left], [c.imputed for c in right])
    assert {(d.unit, d.time, d.reason) for d in base.dropped} == {(d.unit, d.time, d.reason) for d in permuted.dropped}


@pytest.mark.parametrize("method", ["adjustment", "g-formula"])
def test_outcome_shift_moves_imputed_values(tdc_panel, method):
    """Test that shifting every outcome by a constant shifts the imputed Y(0) and keeps the ATT."""
    base = k1_report(tdc_panel, method)
    shifted = k1_report(tdc_panel.with_outcome_shift(3.0), method)
    assert shifted.value == pytest.approx(base.value, abs=1e-9)
    assert shifted.se == pytest.approx(base.se, abs=1e-9)
    left, right = by_label(base), by_label(shifted)
    assert [(c.unit, c.time) for c in left] == [(c.unit, c.time) for c in right]
    assert np.allclose([c.imputed + 3.0 for c in left], [c.imputed for c in right])
    assert np.allclose([c.contrast for c in left], [c.contrast for c in right])
