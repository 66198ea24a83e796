import pytest
import numpy as np
from scipy.stats import chisquare
from gfcast.config import BUNDLED_DGPS, CONFIGS_DIR
from gfcast.exceptions import ConfigError, DgpError
from gfcast.models import DgpConfig, WindowSpec
from gfcast.services.simulator import Dgp, load_dgp, simulate
from gfcast.stats import fit_conditional_tables
from gfcast.utils.io_utils import load_json


def tdc_config() -> dict:
    return load_json(CONFIGS_DIR / "tdc-on.json")


def test_bundled_dgps_load():
    """Test that every bundled DGP validates."""
    for name in BUNDLED_DGPS:
        dgp = load_dgp(name)
        assert dgp.name == name, dgp


def test_simulation_is_deterministic(tdc_dgp):
    """Test that the same seed reproduces the panel and another seed does not."""
    first = simulate(tdc_dgp, 10, 30, seed=4)
    assert first == simulate(tdc_dgp, 10, 30, seed=4)
    assert first != simulate(tdc_dgp, 10, 30, seed=5)
    assert first.units[0] == "u1"


def test_unit_streams_are_independent(tdc_dgp):
    """Test that adding units leaves the earlier units unchanged."""
    small = simulate(tdc_dgp, 3, 20, seed=9)
    large = simulate(tdc_dgp, 6, 20, seed=9)
    assert small == large.take_units(range(3))


def test_action_columns(tdc_panel, exposure_panel):
    """Test that treatment DGPs copy z into s and exposure DGPs leave z at zero."""
    assert np.array_equal(tdc_panel.z, tdc_panel.s)
    assert not exposure_panel.z.any()
    assert exposure_panel.s.max() > 0


def test_unknown_dgp():
    """Test that an unknown bundled name raises ConfigError."""
    with pytest.raises(ConfigError):
        load_dgp("no-such-model")


def test_bad_table_row():
    """Test that a row not summing to one is rejected."""
    data = tdc_config()
    data["outcome_model"][0][0][0] = [0.5, 0.6]
    with pytest.raises(DgpError):
        Dgp(DgpConfig.model_validate(data))


def test_tdc_off_is_checked():
    """Test that declaring tdc off on a confounded model raises DgpError."""
    data = tdc_config()
    data["time_dependent_confounding"] = "off"
    with pytest.raises(DgpError):
        Dgp(DgpConfig.model_validate(data))


def test_first_covariate_follows_initial_law(null_dgp):
    """Test the t=1 covariate marginal against the initial law."""
    panel = simulate(null_dgp, 4000, 1, seed=2)
    observed = np.bincount(panel.x_joint[:, 0], minlength=2)
    _, p_value = chisquare(observed, null_dgp.init_x * 4000)
    assert p_value > 1e-4, observed


def test_drift_switches_tables():
    """Test that the drift tables replace the base ones from the drift time."""
    dgp = load_dgp("drift-shift")
    assert dgp.drift_at == 51
    base, drifted = dgp.tables(50), dgp.tables(51)
    assert base[0] is dgp.covariate_transition
    assert not np.array_equal(base[0], drifted[0])
    assert np.array_equal(base[1], drifted[1]), "action model has no drift"
    assert dgp.tables(50)[0][:, :, :, 2].sum() == 0


def test_table_shape_follows_lags():
    """Test that table shapes are checked against the declared lag orders."""
    data = tdc_config()
    data["lags"] = {"covariate_x": 2}
    with pytest.raises(DgpError):
        Dgp(DgpConfig.model_validate(data))
    dgp = load_dgp("outcome-lag2")
    assert dgp.covariate_transition.shape == (2, 2, 2, 2, 2)
    assert dgp.outcome_model.shape == (2, 2, 2, 2, 2)
    assert (dgp.depth_x, dgp.depth_a, dgp.depth_y) == (2, 1, 2)


def test_history_helpers():
    """Test lag padding and pushing, single and batched."""
    assert Dgp.history(1, 3) == (1, 1, 1)
    assert Dgp.history((0, 1), 3) == (0, 1, 1)
    assert Dgp.history((0, 1, 1), 2) == (0, 1)
    assert Dgp.push((-1, -1), 1) == (1, 1)
    assert Dgp.push((0, 1), 1) == (1, 0)
    batch = Dgp.push(np.array([[-1, -1], [0, 1]]), np.array([1, 0]))
    assert batch.tolist() == [[1, 1], [0, 0]]


def test_second_order_tables_are_recovered():
    """Test that tables fitted with matching lags recover a second-order model."""
    dgp = load_dgp("outcome-lag2")
    panel = simulate(dgp, 200, 100, seed=6)
    tables = fit_conditional_tables(panel, WindowSpec(L_xx=2, L_yy=2), 1, "z")
    covariate, action, outcome = dgp.tables(1)
    # fitted keys follow the table axes
    for table, truth in ((tables.covariate, covariate), (tables.outcome, outcome), (tables.action, action)):
        assert len(table) == int(np.prod(truth.shape[:-1])), table
        for key, row in table.counts.items():
            n = row.sum()
            for p_hat, p in zip(row / n, truth[key]):
                assert abs(p_hat - p) <= 4.5 * np.sqrt(p * (1 - p) / n) + 1e-9, (table.name, key)
