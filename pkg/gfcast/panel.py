import logging
import numpy as np
from typing import Optional
from .models import PanelSchema, WindowSpec, HistoryView, UnitSet
from .exceptions import PanelError, GridError, WindowError
from .utils.utils import joint_codes

logger = logging.getLogger(__name__)


class Panel:
    """Immutable unit-by-time panel holding grid codes for z, s, y and the covariates.

    Attributes:
        schema (PanelSchema): Declared grids.
        units (list[str]): Unit labels in row order.
        z (np.ndarray): (I, T) binary treatment.
        s (np.ndarray): (I, T) exposure codes.
        y (np.ndarray): (I, T) outcome codes.
        x (np.ndarray): (I, T, P) covariate codes.
        x_joint (np.ndarray): (I, T) joint covariate state.
        y_values (np.ndarray): (I, T) outcome values.
        s_values (np.ndarray): (I, T) exposure values."""

    def __init__(self, schema: PanelSchema, units: list[str], z, s, y, x):
        self.schema = schema
        self.units = list(units)
        self.z = np.asarray(z, dtype=np.int64)
        self.s = np.asarray(s, dtype=np.int64)
        self.y = np.asarray(y, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.int64)
        self._validate()
        self.x_joint = joint_codes(self.x, schema.covariate_sizes)
        self.y_values = np.asarray(schema.outcome.numeric_values())[self.y]
        self.s_values = np.asarray(schema.exposure.numeric_values())[self.s]
        for array in (self.z, self.s, self.y, self.x, self.x_joint, self.y_values, self.s_values):
            array.flags.writeable = False

    def _validate(self):
        I = len(self.units)
        if I == 0:
            raise PanelError("panel has no units")
        if len(set(self.units)) != I:
            raise PanelError("duplicate unit labels")
        shape = self.z.shape
        if len(shape) != 2 or shape[0] != I or shape[1] < 1:
            raise PanelError(f"treatment matrix has shape {shape}, expected ({I}, T)")
        for name, array in (("s", self.s), ("y", self.y)):
            if array.shape != shape:
                raise PanelError(f"{name} matrix has shape {array.shape}, expected {shape}")
        P = len(self.schema.covariates)
        if self.x.shape != (*shape, P):
            raise PanelError(f"covariate tensor has shape {self.x.shape}, expected {(*shape, P)}")
        checks = [("z", self.z, 2), ("s", self.s, self.schema.exposure.size), ("y", self.y, self.schema.outcome.size)]
        checks += [(grid.name, self.x[..., p], grid.size) for p, grid in enumerate(self.schema.covariates)]
        for name, array, size in checks:
            bad = np.argwhere((array < 0) | (array >= size))
            if len(bad):
                i, t = bad[0][:2]
                raise GridError(f"{name} code {array[tuple(bad[0])]} off grid at unit {self.units[i]}, time {t + 1}",
                                column=name, unit=self.units[i], time=int(t) + 1)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def horizon(self) -> int:
        return self.z.shape[1]

    def action(self, variable: str) -> np.ndarray:
        """Code matrix of the intervened variable ('z' or 's')."""
        return self.z if variable == "z" else self.s

    def with_outcome_shift(self, shift: float) -> "Panel":
        """Copy with every outcome grid value shifted by a constant."""
        outcome = self.schema.outcome.model_copy(update={
            "values": [float(v) + shift for v in self.schema.outcome.values],
            "bin_edges": None,
        })
        schema = self.schema.model_copy(update={"outcome": outcome})
        return Panel(schema, self.units, self.z, self.s, self.y, self.x)

    def take_units(self, order) -> "Panel":
        order = list(order)
        return Panel(self.schema, [self.units[i] for i in order], self.z[order], self.s[order],
                     self.y[order], self.x[order])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Panel):
            return NotImplemented
        return (self.schema == other.schema and self.units == other.units
                and all(np.array_equal(a, b) for a, b in
                        ((self.z, other.z), (self.s, other.s), (self.y, other.y), (self.x, other.x))))

    def __repr__(self) -> str:
        return f"Panel(I={self.n_units}, T={self.horizon}, P={self.x.shape[2]})"


def check_query(spec: WindowSpec, t: int, horizon: int):
    """Reject query times whose windowed history leaves [1, T]."""
    if t > horizon:
        raise WindowError(f"t={t} exceeds horizon T={horizon}", bound="t <= T", t=t)
    earliest = spec.earliest(t)
    if earliest < 1:
        raise WindowError(
            f"window underflows time 1 at t={t}: t-B-max(L_x, L_y) = {earliest}",
            bound="t-B-max(L_x,L_y) >= 1", t=t)


def extract_history(panel: Panel, spec: WindowSpec, i: int, t: int) -> HistoryView:
    """Slice R̄, V̄ and the action windows of unit i at query time t.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        i (int): Unit index.
        t (int): 1-based query time.

    Returns:
        HistoryView: Windowed histories, oldest first."""
    check_query(spec, t, panel.horizon)
    if not 0 <= i < panel.n_units:
        raise WindowError(f"unit index {i} out of range", bound="0 <= i < I")
    rx = list(spec.r_covariate_times(t))
    ry = list(spec.r_outcome_times(t))
    vx = list(spec.v_covariate_times(t))
    vy = list(spec.v_outcome_times(t))
    window = list(spec.window_times(t))
    col = lambda times: [tau - 1 for tau in times]
    return HistoryView(
        unit=i,
        time=t,
        anchor=spec.anchor(t),
        window_times=window,
        r_covariate_times=rx,
        r_outcome_times=ry,
        v_covariate_times=vx,
        v_outcome_times=vy,
        r_bar=tuple(int(v) for v in panel.x_joint[i, col(rx)]) + tuple(int(v) for v in panel.y[i, col(ry)]),
        v_bar=tuple(int(v) for v in panel.x_joint[i, col(vx)]) + tuple(int(v) for v in panel.y[i, col(vy)]),
        r_covariates=[[int(v) for v in panel.x[i, tau - 1]] for tau in rx],
        z_window=tuple(int(v) for v in panel.z[i, col(window)]),
        s_window=tuple(int(v) for v in panel.s[i, col(window)]),
    )


class HistoryIndex:
    """Windowed histories of every observed (i, t) with a complete history, in time-major
    order (all units at the first query time, then the next time, ...).

    Attributes:
        unit, time (np.ndarray): Row coordinates.
        r (np.ndarray): R̄ codes, covariate states then outcomes.
        vx, vy (np.ndarray): V̄ covariate states and outcome codes.
        z, s (np.ndarray): Treatment and exposure windows (K+1 columns).
        pre_s (np.ndarray): Exposure codes at H-1, ..., H-L_ss (-1 before time 1).
        y_code, y_value (np.ndarray): Outcome at t."""

    def __init__(self, panel: Panel, spec: WindowSpec):
        self.panel = panel
        self.spec = spec
        self.first_time = spec.first_query_time
        times = np.arange(self.first_time, panel.horizon + 1)
        I = panel.n_units
        self.time = np.repeat(times, I)
        self.unit = np.tile(np.arange(I), len(times))
        H = self.time - spec.B - spec.K

        def gather(matrix, offsets):
            offsets = np.asarray(list(offsets), dtype=np.int64)
            if len(offsets) == 0 or len(self.time) == 0:
                return np.zeros((len(self.time), len(offsets)), dtype=np.int64)
            return matrix[self.unit[:, None], H[:, None] + offsets[None, :] - 1]

        # offsets relative to H
        B, K = spec.B, spec.K
        r_x = range(-(spec.L_x - K), 1)
        r_y = range(-(spec.L_y - K), spec.y_offset)
        n_vy = len(spec.v_outcome_times(self.first_time))
        v_y = range(spec.y_offset, spec.y_offset + n_vy)
        self.r = np.hstack([gather(panel.x_joint, r_x), gather(panel.y, r_y)])
        self.vx = gather(panel.x_joint, range(1, K + 1))
        self.vy = gather(panel.y, v_y)
        self.z = gather(panel.z, range(0, K + 1))
        self.s = gather(panel.s, range(0, K + 1))
        pre = np.stack([H - lag for lag in range(1, spec.L_ss + 1)], axis=1) if len(H) else np.zeros((0, spec.L_ss), int)
        valid = pre >= 1
        self.pre_s = np.where(valid, panel.s[self.unit[:, None], np.clip(pre, 1, None) - 1], -1)
        self.y_code = panel.y[self.unit, self.time - 1] if len(self.time) else np.zeros(0, dtype=np.int64)
        self.y_value = panel.y_values[self.unit, self.time - 1] if len(self.time) else np.zeros(0)
        self._keys = {}
        self._positions = None

    def __len__(self) -> int:
        return len(self.time)

    def row(self, i: int, t: int) -> Optional[int]:
        """Row position of (i, t), None when it has no complete history or was left out."""
        if self._positions is None:
            self._positions = {(int(u), int(s)): k for k, (u, s) in enumerate(zip(self.unit, self.time))}
        return self._positions.get((i, t))

    def window(self, variable: str) -> np.ndarray:
        return self.z if variable == "z" else self.s

    def conditioning(self, kind: str) -> np.ndarray:
        """Key matrix for 'r' (R̄) or 'rv' ([R̄, V̄])."""
        if kind == "r":
            return self.r
        return np.hstack([self.r, self.vx, self.vy])

    def keys(self, kind: str) -> list[tuple[int, ...]]:
        if kind not in self._keys:
            self._keys[kind] = [tuple(int(v) for v in row) for row in self.conditioning(kind)]
        return self._keys[kind]

    def support(self) -> set[tuple[int, ...]]:
        """supp(U^obs): every R̄ value observed in the panel."""
        return set(self.keys("r"))

    def subset(self, mask: np.ndarray) -> "HistoryIndex":
        """Copy restricted to the rows where mask is true, order preserved."""
        clone = object.__new__(HistoryIndex)
        clone.panel, clone.spec, clone.first_time = self.panel, self.spec, self.first_time
        for name in ("time", "unit", "r", "vx", "vy", "z", "s", "pre_s", "y_code", "y_value"):
            setattr(clone, name, getattr(self, name)[mask])
        clone._keys = {}
        clone._positions = None
        return clone


def build_unit_sets(panel: Panel, spec: WindowSpec, mapper) -> tuple[UnitSet, UnitSet]:
    """U^obs and U_1^obs: every (i, t) whose treatment window lies inside the panel, and
    those among them with D_it = 1. (i, t) with an undefined window are left out.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        mapper (TreatmentMapper): h(.) rule.

    Returns:
        tuple[UnitSet, UnitSet]: (observed-all, observed-treated), time-major order."""
    first = spec.B + spec.K + 1
    observed, treated = [], []
    for t in range(first, panel.horizon + 1):
        H = spec.anchor(t)
        windows = panel.z[:, H - 1:t - spec.B]
        d = mapper.indicator(windows)
        for i in range(panel.n_units):
            observed.append((i, t))
            if d[i]:
                treated.append((i, t))
    logger.info(f"Unit sets built: |U_obs|={len(observed)}, |U1_obs|={len(treated)}.")
    return (UnitSet(kind="observed-all", horizon=panel.horizon, members=observed),
            UnitSet(kind="observed-treated", horizon=panel.horizon, members=treated))
