import pytest
import numpy as np
from gfcast.models import ColumnGrid, PanelSchema, WindowSpec
from gfcast.panel import Panel
from gfcast.services.simulator import load_dgp, simulate


@pytest.fixture(scope="session")
def tdc_dgp():
    return load_dgp("tdc-on")


@pytest.fixture(scope="session")
def tdc_panel(tdc_dgp):
    return simulate(tdc_dgp, 20, 60, 11)


@pytest.fixture(scope="session")
def null_dgp():
    return load_dgp("null-effect")


@pytest.fixture(scope="session")
def null_panel(null_dgp):
    return simulate(null_dgp, 20, 60, 7)


@pytest.fixture(scope="session")
def exposure_dgp():
    return load_dgp("exposure-toy")


@pytest.fixture(scope="session")
def exposure_panel(exposure_dgp):
    return simulate(exposure_dgp, 20, 80, 5)


@pytest.fixture(scope="session")
def drift_panel():
    return simulate(load_dgp("drift-shift"), 20, 50, 3)


@pytest.fixture
def toy_schema():
    return PanelSchema(outcome=ColumnGrid(name="y", values=[0, 1]),
                       covariates=[ColumnGrid(name="x", values=[0, 1])])


@pytest.fixture
def toy_panel(toy_schema):
    """Two units over four periods, covariate constant at 0.

    With K = 0 the strata are (x_t, y_{t-1}): u1 is treated at t=2 in stratum (0, 0)
    and u2 at t=3 in stratum (0, 1)."""
    z = np.array([[0, 1, 0, 0], [0, 0, 1, 0]])
    y = np.array([[0, 1, 0, 1], [0, 1, 1, 0]])
    x = np.zeros((2, 4, 1), dtype=np.int64)
    return Panel(toy_schema, ["u1", "u2"], z, z.copy(), y, x)


@pytest.fixture
def k0_spec():
    return WindowSpec(B=0, K=0)
