import pytest
import numpy as np
from gfcast.exceptions import GridError, PanelError, WindowError
from gfcast.mapping import build_mapper
from gfcast.models import MapperSpec, WindowSpec
from gfcast.panel import Panel, HistoryIndex, build_unit_sets, check_query, extract_history


def test_extract_history_slices_windows(tdc_panel):
    """Test that R̄, V̄ and the action windows come from the right times."""
    spec = WindowSpec(B=0, K=2)
    view = extract_history(tdc_panel, spec, 3, 20)
    assert view.anchor == 18
    assert view.window_times == [18, 19, 20]
    assert view.r_bar == (int(tdc_panel.x_joint[3, 17]), int(tdc_panel.y[3, 16]))
    assert view.v_bar == (int(tdc_panel.x_joint[3, 18]), int(tdc_panel.x_joint[3, 19]),
                          int(tdc_panel.y[3, 17]), int(tdc_panel.y[3, 18]))
    assert view.z_window == tuple(int(v) for v in tdc_panel.z[3, 17:20])


def test_check_query_bounds():
    """Test underflow before time 1 and queries past T."""
    spec = WindowSpec(B=0, K=2)
    check_query(spec, 4, 60)
    with pytest.raises(WindowError):
        check_query(spec, 3, 60)
    with pytest.raises(WindowError):
        check_query(spec, 61, 60)


def test_history_index_matches_extract_history(tdc_panel):
    """Test that the vectorized index agrees with the per-unit slicer."""
    spec = WindowSpec(B=1, K=2)
    index = HistoryIndex(tdc_panel, spec)
    assert index.first_time == spec.first_query_time
    assert len(index) == tdc_panel.n_units * (tdc_panel.horizon - spec.first_query_time + 1)
    for i, t in [(0, spec.first_query_time), (7, 33), (19, 60)]:
        row = index.row(i, t)
        view = extract_history(tdc_panel, spec, i, t)
        assert index.keys("r")[row] == view.r_bar, (i, t)
        assert index.keys("rv")[row] == view.r_bar + view.v_bar, (i, t)
        assert tuple(index.z[row]) == view.z_window
        assert index.y_value[row] == tdc_panel.y_values[i, t - 1]
    assert index.row(0, spec.first_query_time - 1) is None


def test_history_index_subset(tdc_panel):
    """Test that a subset keeps row order and recomputes positions."""
    index = HistoryIndex(tdc_panel, WindowSpec())
    sub = index.subset(index.unit != 0)
    assert len(sub) == len(index) - (tdc_panel.horizon - 1)
    assert sub.row(0, 10) is None
    assert sub.keys("r")[sub.row(1, 10)] == index.keys("r")[index.row(1, 10)]


def test_unit_sets(tdc_panel):
    """Test U^obs and U_1^obs for the one-day mapper."""
    spec = WindowSpec(B=0, K=2)
    mapper = build_mapper(MapperSpec(kind="one-day"), spec)
    observed, treated = build_unit_sets(tdc_panel, spec, mapper)
    assert len(observed) == tdc_panel.n_units * (tdc_panel.horizon - 2)
    assert len(treated) == int(tdc_panel.z[:, 2:].sum())
    assert all(tdc_panel.z[i, t - 1] == 1 for i, t in treated.members)


def test_panel_rejects_bad_input(toy_schema):
    """Test duplicate labels, shape mismatches and off-grid codes."""
    z = np.zeros((2, 3), dtype=np.int64)
    x = np.zeros((2, 3, 1), dtype=np.int64)
    with pytest.raises(PanelError):
        Panel(toy_schema, ["a", "a"], z, z, z, x)
    with pytest.raises(PanelError):
        Panel(toy_schema, ["a", "b"], z, z[:, :2], z, x)
    y = z.copy()
    y[1, 2] = 3
    with pytest.raises(GridError):
        Panel(toy_schema, ["a", "b"], z, z, y, x)


def test_outcome_shift(toy_panel):
    """Test that shifting the outcome grid moves every outcome value."""
    shifted = toy_panel.with_outcome_shift(10.0)
    assert np.array_equal(shifted.y_values, toy_panel.y_values + 10.0)
    assert np.array_equal(shifted.y, toy_panel.y)
