import logging
import numpy as np
from pathlib import Path
from typing import Union
from ..config import CONFIGS_DIR, BUNDLED_DGPS
from ..exceptions import DgpError, ConfigError
from ..models import ColumnGrid, DgpConfig, PanelSchema
from ..panel import Panel
from ..utils.io_utils import load_model
from ..utils.utils import SIMULATE, stream, sample_rows, split_codes

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-12


class Dgp:
    """Structural model over (x, a, y) with declared lag orders and an optional table shift.

    At t = 1 the covariate state is drawn from its initial law; for t >= 2 from
    covariate_transition indexed by the lagged x, a and y codes. The action follows
    action_model on (x lags from t, y lags, a lags) and the outcome outcome_model on
    (x lags from t, a lags from t, y lags). Lags run newest first. a_0 and y_0 come from
    their initial laws, are not part of the panel and fill every lag before time 1; x lags
    before time 1 repeat x_1.

    Attributes:
        config (DgpConfig): Source configuration.
        lags (DgpLags): Declared lag orders.
        n_x, n_a, n_y (int): Joint covariate, action and outcome grid sizes.
        depth_x, depth_a, depth_y (int): History lengths the forward pass keeps.
        covariate_transition, action_model, outcome_model (np.ndarray): Base tables.
        init_x, init_a, init_y (np.ndarray): Initial laws.
        drift_at (int | None): First time the drift tables apply."""

    def __init__(self, config: DgpConfig):
        self.config = config
        self.name = config.name
        self.kind = config.kind
        self.lags = config.lags
        self.covariate_sizes = tuple(grid.size for grid in config.covariates)
        self.n_x = int(np.prod(self.covariate_sizes))
        self.n_a = config.action.size
        self.n_y = config.outcome.size
        lags = self.lags
        self.depth_x = max(lags.covariate_x, lags.action_x, lags.outcome_x)
        self.depth_a = max(lags.covariate_a, lags.action_a, lags.outcome_a)
        self.depth_y = max(lags.covariate_y, lags.action_y, lags.outcome_y)
        if self.kind == "treatment" and [float(v) for v in config.action.numeric_values()] != [0.0, 1.0]:
            raise DgpError(f"{self.name}: treatment DGPs need the action grid [0, 1]")
        if not config.outcome.is_numeric or not config.action.is_numeric:
            raise DgpError(f"{self.name}: action and outcome grids must be numeric")
        self.y_values = np.asarray(config.outcome.numeric_values())
        self.a_values = np.asarray(config.action.numeric_values())
        self.init_x = self._table("initial.x", config.initial.x, (self.n_x,))
        self.init_a = self._table("initial.a", config.initial.a, (self.n_a,))
        self.init_y = self._table("initial.y", config.initial.y, (self.n_y,))
        self.covariate_transition, self.action_model, self.outcome_model = self._tables(config)
        self.drift_at = None
        self._drift = None
        if config.modifier_drift is not None:
            drift = config.modifier_drift
            self.drift_at = drift.at
            self._drift = (
                self._covariate(drift.covariate_transition) if drift.covariate_transition else self.covariate_transition,
                self._action(drift.action_model) if drift.action_model else self.action_model,
                self._outcome(drift.outcome_model) if drift.outcome_model else self.outcome_model,
            )
        if config.time_dependent_confounding == "off":
            self._check_no_tdc()

    def _table(self, name: str, values, shape: tuple[int, ...]) -> np.ndarray:
        try:
            table = np.asarray(values, dtype=float)
        except ValueError:
            raise DgpError(f"{self.name}: {name} is not a dense numeric array")
        if table.shape != shape:
            raise DgpError(f"{self.name}: {name} has shape {table.shape}, expected {shape} for lags "
                           f"{self.lags.model_dump()}")
        if np.any(table < 0):
            raise DgpError(f"{self.name}: {name} has negative entries")
        sums = table.sum(axis=-1)
        bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOLERANCE)
        if len(bad):
            raise DgpError(f"{self.name}: row {tuple(int(v) for v in bad[0])} of {name} sums to {sums[tuple(bad[0])]!r}")
        return table

    def _covariate(self, values):
        lags = self.lags
        shape = (self.n_x,) * lags.covariate_x + (self.n_a,) * lags.covariate_a + (self.n_y,) * lags.covariate_y
        return self._table("covariate_transition", values, shape + (self.n_x,))

    def _action(self, values):
        lags = self.lags
        shape = (self.n_x,) * lags.action_x + (self.n_y,) * lags.action_y + (self.n_a,) * lags.action_a
        return self._table("action_model", values, shape + (self.n_a,))

    def _outcome(self, values):
        lags = self.lags
        shape = (self.n_x,) * lags.outcome_x + (self.n_a,) * lags.outcome_a + (self.n_y,) * lags.outcome_y
        return self._table("outcome_model", values, shape + (self.n_y,))

    def _tables(self, config: DgpConfig):
        return (self._covariate(config.covariate_transition), self._action(config.action_model),
                self._outcome(config.outcome_model))

    def _check_no_tdc(self):
        lags = self.lags
        covariate_keep = (slice(None),) * lags.covariate_x + (slice(0, 1),) * (lags.covariate_a + lags.covariate_y)
        action_keep = (slice(None),) * lags.action_x + (slice(0, 1),) * lags.action_y
        for covariate, action, _ in (self.tables(1), self.tables(self.drift_at or 1)):
            if not np.allclose(covariate, covariate[covariate_keep], atol=ROW_TOLERANCE, rtol=0):
                raise DgpError(f"{self.name}: time_dependent_confounding=off but the covariate law "
                               f"depends on the lagged action or outcome")
            if not np.allclose(action, action[action_keep], atol=ROW_TOLERANCE, rtol=0):
                raise DgpError(f"{self.name}: time_dependent_confounding=off but the action law "
                               f"depends on the lagged outcome")

    def tables(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(covariate, action, outcome) tables in force at time t."""
        if self.drift_at is not None and t >= self.drift_at:
            return self._drift
        return self.covariate_transition, self.action_model, self.outcome_model

    @staticmethod
    def history(value, depth: int) -> tuple[int, ...]:
        """Lag tuple of length depth, newest first; short tuples repeat their oldest entry."""
        if np.ndim(value) == 0:
            return (int(value),) * depth
        codes = tuple(int(v) for v in value)[:depth]
        return codes + (codes[-1],) * (depth - len(codes))

    @staticmethod
    def push(hist, value):
        """Prepend the newest code and drop the oldest; -1 entries take the new code.

        Works on one history (tuple) or on a batch ((n, depth) array with (n,) values)."""
        if isinstance(hist, tuple):
            value = int(value)
            return tuple(value if v < 0 else v for v in (value,) + hist[:-1])
        value = np.asarray(value)[:, None]
        shifted = np.concatenate([value, hist[:, :-1]], axis=1)
        return np.where(shifted < 0, value, shifted)

    @staticmethod
    def _lags(hist, depth: int) -> tuple:
        if isinstance(hist, tuple):
            return hist[:depth]
        return tuple(np.asarray(hist)[..., :depth].T)

    def covariate_rows(self, table: np.ndarray, xh, ah, yh) -> np.ndarray:
        """Covariate law after histories ending at t-1; the initial law before time 1."""
        lags = self.lags
        if isinstance(xh, tuple):
            if xh[0] < 0:
                return self.init_x
            return table[xh[:lags.covariate_x] + ah[:lags.covariate_a] + yh[:lags.covariate_y]]
        xh = np.asarray(xh)
        index = self._lags(np.maximum(xh, 0), lags.covariate_x) + self._lags(ah, lags.covariate_a) \
            + self._lags(yh, lags.covariate_y)
        return np.where((xh[:, 0] < 0)[:, None], self.init_x[None, :], table[index])

    def action_rows(self, table: np.ndarray, xh, yh, ah) -> np.ndarray:
        """Action law given x history from t and y and a histories from t-1."""
        lags = self.lags
        return table[self._lags(xh, lags.action_x) + self._lags(yh, lags.action_y) + self._lags(ah, lags.action_a)]

    def outcome_rows(self, table: np.ndarray, xh, ah, yh) -> np.ndarray:
        """Outcome law given x and a histories from t and the y history from t-1."""
        lags = self.lags
        return table[self._lags(xh, lags.outcome_x) + self._lags(ah, lags.outcome_a) + self._lags(yh, lags.outcome_y)]

    @property
    def action_variable(self) -> str:
        return "z" if self.kind == "treatment" else "s"

    def schema(self) -> PanelSchema:
        exposure = self.config.action if self.kind == "exposure" else ColumnGrid(name="s", values=[0, 1])
        return PanelSchema(
            treatment=ColumnGrid(name="z", values=[0, 1]),
            exposure=exposure.model_copy(update={"name": "s"}),
            outcome=self.config.outcome.model_copy(update={"name": "y"}),
            covariates=self.config.covariates,
        )

    def __repr__(self) -> str:
        return f"Dgp({self.name}, kind={self.kind}, n_x={self.n_x}, n_a={self.n_a}, n_y={self.n_y})"


def load_dgp(source: Union[str, Path]) -> Dgp:
    """Load a bundled DGP by name or a DGP config file by path."""
    path = Path(source)
    if not path.suffix:
        if str(source) not in BUNDLED_DGPS:
            raise ConfigError(f"unknown bundled DGP '{source}'", known=", ".join(BUNDLED_DGPS))
        path = CONFIGS_DIR / f"{source}.json"
    return Dgp(load_model(path, DgpConfig))


def simulate(dgp: Dgp, n_units: int, horizon: int, seed: int) -> Panel:
    """Forward-sample a panel: x, then the action, then y at every time.

    Args:
        dgp (Dgp): Structural model.
        n_units (int): I.
        horizon (int): T.
        seed (int): Run seed; unit i draws from its own stream.

    Returns:
        Panel: Units labelled u1..uI."""
    if n_units < 1 or horizon < 1:
        raise DgpError(f"need I >= 1 and T >= 1, got I={n_units}, T={horizon}")
    logger.info(f"Simulating {dgp.name}: I={n_units}, T={horizon}, seed={seed}.")
    u = np.stack([stream(seed, SIMULATE, i).random((horizon + 1, 3)) for i in range(n_units)])
    x = np.zeros((n_units, horizon), dtype=np.int64)
    a = np.zeros((n_units, horizon), dtype=np.int64)
    y = np.zeros((n_units, horizon), dtype=np.int64)
    ones = np.ones((n_units, 1))
    a_0 = sample_rows(ones * dgp.init_a, u[:, 0, 1])
    y_0 = sample_rows(ones * dgp.init_y, u[:, 0, 2])
    xh = np.full((n_units, dgp.depth_x), -1, dtype=np.int64)
    ah = np.repeat(a_0[:, None], dgp.depth_a, axis=1)
    yh = np.repeat(y_0[:, None], dgp.depth_y, axis=1)
    for t in range(1, horizon + 1):
        covariate, action, outcome = dgp.tables(t)
        x_t = sample_rows(dgp.covariate_rows(covariate, xh, ah, yh), u[:, t, 0])
        xh = dgp.push(xh, x_t)
        a_t = sample_rows(dgp.action_rows(action, xh, yh, ah), u[:, t, 1])
        ah = dgp.push(ah, a_t)
        y_t = sample_rows(dgp.outcome_rows(outcome, xh, ah, yh), u[:, t, 2])
        yh = dgp.push(yh, y_t)
        x[:, t - 1], a[:, t - 1], y[:, t - 1] = x_t, a_t, y_t
    if dgp.kind == "treatment":
        z, s = a, a.copy()
    else:
        z, s = np.zeros_like(a), a
    logger.info(f"Simulation of {dgp.name} finished.")
    return Panel(dgp.schema(), [f"u{i + 1}" for i in range(n_units)], z, s, y,
                 split_codes(x, dgp.covariate_sizes))
