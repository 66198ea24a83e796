import math
from typing import Any, Literal, Optional, Union
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from .config import (
    SCHEMA_VERSION,
    MIN_CELL,
    ENUMERATION_CAP,
    MC_PATHS,
    N_DRAWS,
    JACKKNIFE_GROUPS
)

LAW_TOLERANCE = 1e-9


def _check_law(law: list[float], what: str) -> list[float]:
    if any(p < 0 for p in law):
        raise ValueError(f"{what} has negative mass")
    if abs(math.fsum(law) - 1.0) > LAW_TOLERANCE:
        raise ValueError(f"{what} sums to {math.fsum(law)!r}, expected 1")
    return law


class ColumnGrid(BaseModel):
    """Finite grid of admissible values for one panel column.

    Attributes:
        name (str): Column name in the long-format CSV.
        values (list): Grid values; a value's position is its integer code.
        bin_edges (Optional[list[float]]): Edges used to bin raw continuous input at
            ingestion. Bin k is [edges[k], edges[k+1]) and the last bin is closed."""
    name: str
    values: list[Union[float, str]]
    bin_edges: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if not self.values:
            raise ValueError(f"grid '{self.name}' is empty")
        if len(set(map(str, self.values))) != len(self.values):
            raise ValueError(f"grid '{self.name}' has duplicate values")
        if self.bin_edges is not None:
            edges = self.bin_edges
            if len(edges) != len(self.values) + 1:
                raise ValueError(f"grid '{self.name}' needs {len(self.values) + 1} bin edges")
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError(f"bin edges of '{self.name}' must increase strictly")
            for k, value in enumerate(self.values):
                if isinstance(value, str) or not edges[k] <= value <= edges[k + 1]:
                    raise ValueError(f"value {value!r} of '{self.name}' lies outside its bin")
        return self

    @property
    def size(self) -> int:
        return len(self.values)

    @property
    def is_numeric(self) -> bool:
        return all(not isinstance(v, str) for v in self.values)

    def numeric_values(self) -> list[float]:
        if not self.is_numeric:
            raise ValueError(f"grid '{self.name}' is categorical")
        return [float(v) for v in self.values]

    def code_of(self, value: Any) -> int:
        """Return the code of a grid value, matching numerically for numeric grids."""
        for code, grid_value in enumerate(self.values):
            if isinstance(grid_value, str) or isinstance(value, str):
                if str(grid_value) == str(value):
                    return code
            elif math.isclose(float(grid_value), float(value), rel_tol=1e-12, abs_tol=1e-12):
                return code
        raise ValueError(f"{value!r} is not on the grid of '{self.name}'")


class PanelSchema(BaseModel):
    """Declared grids for every panel column.

    Attributes:
        treatment (ColumnGrid): Binary treatment z, always [0, 1].
        exposure (ColumnGrid): Exposure s grid (numeric).
        outcome (ColumnGrid): Outcome y grid (numeric).
        covariates (list[ColumnGrid]): One categorical grid per covariate x_p."""
    schema_version: int = SCHEMA_VERSION
    treatment: ColumnGrid = ColumnGrid(name="z", values=[0, 1])
    exposure: ColumnGrid = ColumnGrid(name="s", values=[0, 1])
    outcome: ColumnGrid
    covariates: list[ColumnGrid]

    @model_validator(mode="after")
    def _check(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if [float(v) for v in self.treatment.numeric_values()] != [0.0, 1.0]:
            raise ValueError("treatment grid must be [0, 1]")
        if not self.exposure.is_numeric or not self.outcome.is_numeric:
            raise ValueError("exposure and outcome grids must be numeric")
        if not self.covariates:
            raise ValueError("at least one covariate grid is required")
        return self

    @property
    def covariate_sizes(self) -> tuple[int, ...]:
        return tuple(c.size for c in self.covariates)

    @property
    def n_covariate_states(self) -> int:
        return math.prod(self.covariate_sizes)


class WindowSpec(BaseModel):
    """Lag geometry of an analysis. Windows are oldest-first: position 0 is time
    t-B-K and position K is time t-B.

    Attributes:
        B (int): Latency.
        K (int): Carry-over.
        L (int): Lag selecting the decisive window entry, B <= L <= B+K (defaults to B).
        Q (int): Duration used by the multi-day mappers.
        L_x (int): Pre-window covariate lag, L_x >= K (defaults to K).
        L_y (int): Pre-window outcome lag, L_y > K (defaults to K+1).
        L_z, L_xx, L_yx (int): Action, covariate and outcome lags of the covariate law.
        L_xy, L_yy (int): Covariate (counting the current one) and outcome lags of the outcome law.
        L_ss, L_xs, L_ys (int): Exposure, covariate (counting the current one) and outcome
            lags of the action law.
        r_outcome_end (str): 'pre-window' keeps R̄ outcomes through t-B-K-1,
            'window-start' through t-B-K.
        v_outcome_end (str): 'before-window-end' keeps V̄ outcomes through t-B-1,
            'window-end' through min(t-B, t-1)."""
    model_config = ConfigDict(frozen=True)

    B: int = Field(0, ge=0)
    K: int = Field(0, ge=0)
    L: int = 0
    Q: int = Field(1, ge=1)
    L_x: int = 0
    L_y: int = 1
    L_z: int = Field(1, ge=1)
    L_xx: int = Field(1, ge=1)
    L_yx: int = Field(1, ge=1)
    L_xy: int = Field(1, ge=1)
    L_yy: int = Field(1, ge=1)
    L_ss: int = Field(1, ge=1)
    L_xs: int = Field(1, ge=1)
    L_ys: int = Field(1, ge=1)
    r_outcome_end: Literal["pre-window", "window-start"] = "pre-window"
    v_outcome_end: Literal["before-window-end", "window-end"] = "before-window-end"

    @model_validator(mode="before")
    @classmethod
    def _defaults(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            B = int(data.get("B", 0))
            K = int(data.get("K", 0))
            if data.get("L") is None:
                data["L"] = B
            if data.get("L_x") is None:
                data["L_x"] = K
            if data.get("L_y") is None:
                data["L_y"] = K + 1
        return data

    @model_validator(mode="after")
    def _check(self):
        if not self.B <= self.L <= self.B + self.K:
            raise ValueError(f"L={self.L} violates B <= L <= B+K ({self.B} <= L <= {self.B + self.K})")
        if self.L_x < self.K:
            raise ValueError(f"L_x={self.L_x} violates L_x >= K={self.K}")
        if self.L_y <= self.K:
            raise ValueError(f"L_y={self.L_y} violates L_y > K={self.K}")
        return self

    def anchor(self, t: int) -> int:
        """H = t-B-K, the first time of the carry-over window."""
        return t - self.B - self.K

    def earliest(self, t: int) -> int:
        return t - self.B - max(self.L_x, self.L_y)

    @property
    def first_query_time(self) -> int:
        return self.B + max(self.L_x, self.L_y) + 1

    @property
    def y_offset(self) -> int:
        return 1 if self.r_outcome_end == "window-start" else 0

    def window_times(self, t: int) -> range:
        return range(self.anchor(t), t - self.B + 1)

    def r_covariate_times(self, t: int) -> range:
        return range(t - self.B - self.L_x, self.anchor(t) + 1)

    def r_outcome_times(self, t: int) -> range:
        return range(t - self.B - self.L_y, self.anchor(t) + self.y_offset)

    def v_covariate_times(self, t: int) -> range:
        return range(self.anchor(t) + 1, t - self.B + 1)

    def v_outcome_times(self, t: int) -> range:
        last = t - self.B - 1 if self.v_outcome_end == "before-window-end" else min(t - self.B, t - 1)
        return range(self.anchor(t) + self.y_offset, last + 1)


class MapperSpec(BaseModel):
    """Declared h(.) rule. L and Q fall back to the window spec when omitted."""
    kind: Literal["one-day", "any-day", "initiation", "duration-Q", "intermittent-Q"] = "one-day"
    L: Optional[int] = None
    Q: Optional[int] = None


class UnitSet(BaseModel):
    """A set of (unit index, time) pairs.

    Attributes:
        kind (str): observed-all, observed-treated, future-all or future-selected.
        horizon (int): Panel horizon T the membership is checked against.
        members (list[tuple[int, int]]): Unique (unit index, time) pairs."""
    kind: Literal["observed-all", "observed-treated", "future-all", "future-selected"]
    horizon: int
    members: list[tuple[int, int]] = []

    @model_validator(mode="after")
    def _check(self):
        if len(set(self.members)) != len(self.members):
            raise ValueError("unit set members must be unique")
        observed = self.kind.startswith("observed")
        for _, t in self.members:
            if observed and t > self.horizon:
                raise ValueError(f"observed member at t={t} > T={self.horizon}")
            if not observed and t <= self.horizon:
                raise ValueError(f"future member at t={t} <= T={self.horizon}")
        return self

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, item) -> bool:
        return tuple(item) in set(self.members)


class HistoryView(BaseModel):
    """Windowed history of one (i, t). Codes are grid indices; covariates appear as the
    joint covariate state per time in r_bar/v_bar and per covariate in r_covariates."""
    unit: int
    time: int
    anchor: int
    window_times: list[int]
    r_covariate_times: list[int]
    r_outcome_times: list[int]
    v_covariate_times: list[int]
    v_outcome_times: list[int]
    r_bar: tuple[int, ...]
    v_bar: tuple[int, ...]
    r_covariates: list[list[int]]
    z_window: tuple[int, ...]
    s_window: tuple[int, ...]


class FutureWindow(BaseModel):
    """Future treatment geometry: treatment window [origin+F, origin+F+T_Z] and
    outcome window [origin+F+L, origin+F+T_F].

    Attributes:
        F (int): Gap between the forecast origin and the treatment window.
        T_Z (int): Treatment window length.
        T_F (Optional[int]): Outcome window end offset; defaults to L.
        origin (Optional[int]): Forecast origin; defaults to T, smaller values back-test.
        schedule: 'zero' or F-1 explicit gap treatment values."""
    F: int = Field(ge=1)
    T_Z: int = Field(0, ge=0)
    T_F: Optional[int] = None
    origin: Optional[int] = None
    schedule: Union[Literal["zero"], list[int]] = "zero"

    @field_validator("schedule")
    @classmethod
    def _binary(cls, value):
        if isinstance(value, list) and any(v not in (0, 1) for v in value):
            raise ValueError("gap schedule entries must be 0 or 1")
        return value


class ScenarioSpec(BaseModel):
    """Selection rule for U_1^F. Explicit values list R̄ as grid values: covariate values
    time by time (all covariates per time), then outcome values."""
    rule: Literal["fixed-time", "match-past-R", "explicit-R*", "observed-treated"] = "fixed-time"
    values: list[list[Union[float, str]]] = []

    @model_validator(mode="after")
    def _check(self):
        if self.rule == "explicit-R*" and not self.values:
            raise ValueError("explicit-R* needs at least one R̄ value")
        return self


class ExposureSelection(BaseModel):
    kind: Literal["all", "exposed"] = "all"
    threshold: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "exposed" and self.threshold is None:
            raise ValueError("exposed selection needs a threshold")
        return self


class PolicyLags(BaseModel):
    ss: int = Field(1, ge=1)
    xs: int = Field(1, ge=1)
    ys: int = Field(1, ge=1)


class PolicyRule(BaseModel):
    """First-match rule of a dynamic policy: 'when' maps s/x/y to allowed codes per lag
    (s and y from lag 1, x from the current time)."""
    when: dict[Literal["s", "x", "y"], list[list[int]]]
    law: list[float]

    @field_validator("law")
    @classmethod
    def _law(cls, value):
        return _check_law(value, "rule law")


class WeightedVector(BaseModel):
    values: list[float]
    prob: float = Field(ge=0)


class ExposurePolicy(BaseModel):
    """Hypothetical exposure law p*.

    Attributes:
        kind (str): point-mass, truncate-below, explicit-table, dynamic-conditional,
            natural or mixture.
        threshold: s* (scalar broadcast over the window or one value per position).
        table (Optional[list[float]]): Per-time law over the exposure grid.
        vectors (Optional[list[WeightedVector]]): Explicit law over window vectors.
        rules, otherwise, lags: Dynamic-conditional specification.
        components, weights: Mixture specification."""
    schema_version: int = SCHEMA_VERSION
    kind: Literal["point-mass", "truncate-below", "explicit-table", "dynamic-conditional", "natural", "mixture"]
    threshold: Optional[Union[float, list[float]]] = None
    table: Optional[list[float]] = None
    vectors: Optional[list[WeightedVector]] = None
    rules: list[PolicyRule] = []
    otherwise: Union[Literal["natural"], list[float]] = "natural"
    lags: PolicyLags = PolicyLags()
    components: list["ExposurePolicy"] = []
    weights: list[float] = []

    @model_validator(mode="after")
    def _check(self):
        match self.kind:
            case "point-mass" | "truncate-below":
                if self.threshold is None:
                    raise ValueError(f"{self.kind} policy needs a threshold")
            case "explicit-table":
                if (self.table is None) == (self.vectors is None):
                    raise ValueError("explicit-table needs exactly one of table or vectors")
                if self.table is not None:
                    _check_law(self.table, "per-time table")
                else:
                    _check_law([v.prob for v in self.vectors], "vector law")
            case "dynamic-conditional":
                if isinstance(self.otherwise, list):
                    _check_law(self.otherwise, "otherwise law")
            case "mixture":
                if not self.components or len(self.components) != len(self.weights):
                    raise ValueError("mixture needs one weight per component")
                _check_law(self.weights, "mixture weights")
        return self


class AnalysisConfig(BaseModel):
    """Estimation settings shared by estimate/forecast/expose."""
    schema_version: int = SCHEMA_VERSION
    window: WindowSpec = WindowSpec()
    mapper: MapperSpec = MapperSpec()
    method: Literal["adjustment", "g-formula"] = "g-formula"
    conditioning: Optional[Literal["r", "rv"]] = None
    control_convention: Literal["canonical", "weighted"] = "canonical"
    erf_conditioning: Literal["r", "rv", "g-formula"] = "g-formula"
    selection: ExposureSelection = ExposureSelection()
    min_cell: int = Field(default_factory=lambda: MIN_CELL, ge=1)
    enumeration_cap: int = Field(default_factory=lambda: ENUMERATION_CAP, ge=0)
    mc_paths: int = Field(default_factory=lambda: MC_PATHS, ge=2)
    jackknife_groups: int = Field(default_factory=lambda: JACKKNIFE_GROUPS, ge=0)
    seed: Optional[int] = None

    def resolved_conditioning(self) -> str:
        """Default conditioning: R̄ for one-day mappers, [R̄, V̄] for multi-day ones."""
        if self.conditioning is not None:
            return self.conditioning
        return "r" if self.mapper.kind == "one-day" else "rv"


class ForecastConfig(BaseModel):
    schema_version: int = SCHEMA_VERSION
    future: FutureWindow
    scenario: ScenarioSpec = ScenarioSpec()
    n_draws: int = Field(default_factory=lambda: N_DRAWS, ge=1)
    overlap_threshold: float = Field(0.0, ge=0.0, le=1.0)
    method: Literal["adjustment", "g-formula"] = "adjustment"
    seed: Optional[int] = None


class DroppedUnit(BaseModel):
    unit: str
    time: int
    reason: str
    draw: Optional[int] = None


class Contribution(BaseModel):
    unit: str
    unit_index: int
    time: int
    observed: Optional[float] = None
    imputed: float
    contrast: float
    weight: float = 1.0


class DrawTrace(BaseModel):
    draw: int
    value: Optional[float] = None
    n_pairs: int = 0
    aborted: Optional[str] = None


class OverlapReport(BaseModel):
    n_checked: int
    n_violations: int
    violation_fraction: float
    off_support: list[str] = []


class OracleResult(BaseModel):
    """Ground-truth value from the structural model.

    Attributes:
        estimand (str): What was computed.
        value (float): Exact value or Monte Carlo mean.
        mc_standard_error (float): 0 for enumeration.
        method (str): enumeration or monte-carlo.
        replications (int): Monte Carlo replications (0 for enumeration).
        seed (Optional[int]): Monte Carlo seed."""
    estimand: str
    value: float
    mc_standard_error: float = 0.0
    method: Literal["enumeration", "monte-carlo"]
    replications: int = 0
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.method == "enumeration" and self.mc_standard_error != 0.0:
            raise ValueError("enumeration results carry no Monte Carlo error")
        return self


class EstimateReport(BaseModel):
    """Point estimate with diagnostics.

    Attributes:
        estimand (str): ATT, ATT_F, AEE or AEE_F.
        value (float): Mean contribution over retained units (and draws).
        se (float): Combined standard error.
        mc_se (float): Monte Carlo part of the error (integration or draws).
        n_treated (int): Retained contributions.
        n_candidates (int): Size of the unit set before drops.
        total (float): Sum variant (attributable total).
        mode (dict[str, str]): Method flags.
        dropped (list[DroppedUnit]): Drops with reasons.
        contributions (list[Contribution]): Per-unit contributions.
        warnings (list[str]): Diagnostics such as 'tdc-suspected'.
        overlap (Optional[OverlapReport]): Overlap diagnostics for forecasts.
        draws (list[DrawTrace]): Per-draw trace for forecasts.
        oracle (Optional[OracleResult]): Ground truth when a DGP was supplied."""
    schema_version: int = SCHEMA_VERSION
    estimand: str
    value: float
    se: float = 0.0
    mc_se: float = 0.0
    n_treated: int
    n_candidates: int
    total: float
    mode: dict[str, str] = {}
    dropped: list[DroppedUnit] = []
    contributions: list[Contribution] = []
    warnings: list[str] = []
    overlap: Optional[OverlapReport] = None
    draws: list[DrawTrace] = []
    oracle: Optional[OracleResult] = None

    @field_validator("value")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("estimate is not finite")
        return value

    def members(self) -> list[tuple[int, int]]:
        return [(c.unit_index, c.time) for c in self.contributions]


class ErfCell(BaseModel):
    vector: list[float]
    codes: list[int]
    mean: Optional[float] = None
    count: int = 0
    estimable: bool = False
    mc_se: float = 0.0
    reason: Optional[str] = None


class ErfEstimate(BaseModel):
    """Estimated E[Y(s̄) | C̄] for every exposure window vector."""
    unit: str
    time: int
    conditioning: str
    key: str
    cells: list[ErfCell]

    def mean(self, codes) -> Optional[float]:
        for cell in self.cells:
            if tuple(cell.codes) == tuple(codes):
                return cell.mean
        return None


class ImputedHistory(BaseModel):
    """Predicted R̄ of a future (i, t) in one draw, with the action codes at H-1,
    H-2, ... (-1 before time 1)."""
    unit: int
    time: int
    draw: int
    r_bar: tuple[int, ...]
    provenance: tuple[Literal["observed", "imputed"], ...]
    pre_actions: tuple[int, ...] = ()


class ImputedDraw(BaseModel):
    draw: int
    histories: list[ImputedHistory] = []
    aborted: Optional[str] = None


class ExposureLawForecast(BaseModel):
    unit: str
    unit_index: int
    time: int
    law: dict[str, float]
    n_draws: int


class DriftSpec(BaseModel):
    """Tables replacing the base ones for every t >= at."""
    at: int = Field(ge=1)
    covariate_transition: Optional[list] = None
    action_model: Optional[list] = None
    outcome_model: Optional[list] = None


class InitialLaws(BaseModel):
    x: list[float]
    a: list[float]
    y: list[float]


class DgpLags(BaseModel):
    """Lag orders of the structural tables.

    The table axes follow these counts in order: covariate_transition is
    [x lags][a lags][y lags][x], action_model [x][y lags][a lags][a] and outcome_model
    [x][a][y lags][y]. Lags run newest first. The x counts of the action and outcome
    tables and the a count of the outcome table include the current value."""
    covariate_x: int = Field(1, ge=1)
    covariate_a: int = Field(1, ge=1)
    covariate_y: int = Field(1, ge=1)
    action_x: int = Field(1, ge=1)
    action_y: int = Field(1, ge=1)
    action_a: int = Field(1, ge=1)
    outcome_x: int = Field(1, ge=1)
    outcome_a: int = Field(1, ge=1)
    outcome_y: int = Field(1, ge=1)


class DgpConfig(BaseModel):
    """Structural data-generating process.

    Attributes:
        kind (str): 'treatment' (action written to z, s = z) or 'exposure' (action written to s).
        covariates (list[ColumnGrid]): Covariate grids; tables index their joint state.
        action (ColumnGrid): Grid of the action variable.
        outcome (ColumnGrid): Outcome grid.
        initial (InitialLaws): Laws of x_1, a_0 and y_0.
        lags (DgpLags): Lag orders; all 1 gives a first-order model.
        covariate_transition: Dense table, axes per `lags`.
        action_model: Dense table, axes per `lags`.
        outcome_model: Dense table, axes per `lags`.
        time_dependent_confounding (str): 'off' requires the covariate law to ignore
            lagged actions and outcomes and the action law to ignore lagged outcomes.
        modifier_drift (Optional[DriftSpec]): Table shift at time 'at'."""
    schema_version: int = SCHEMA_VERSION
    name: str
    description: str = ""
    kind: Literal["treatment", "exposure"] = "treatment"
    covariates: list[ColumnGrid]
    action: ColumnGrid
    outcome: ColumnGrid
    initial: InitialLaws
    lags: DgpLags = DgpLags()
    covariate_transition: list
    action_model: list
    outcome_model: list
    time_dependent_confounding: Literal["on", "off"] = "on"
    modifier_drift: Optional[DriftSpec] = None
    seed: Optional[int] = None


class EstimandDescriptor(BaseModel):
    """Names an estimand for the oracle.

    Attributes:
        kind (str): ATT, ATT_F, AEE or AEE_F.
        members (list[tuple[int, int]]): (unit index, time) pairs.
        form (str): 'observed' uses Y^obs for the first term, 'conditional' the
            potential-outcome mean.
        policy (Optional[ExposurePolicy]): p* for AEE and AEE_F.
        future (Optional[FutureWindow]): Geometry for ATT_F and AEE_F.
        control_convention (str): canonical or weighted.
        strata (Optional[list[tuple[int, ...]]]): Restrict future members to these R̄ values."""
    kind: Literal["ATT", "ATT_F", "AEE", "AEE_F"]
    members: list[tuple[int, int]]
    form: Literal["observed", "conditional"] = "observed"
    policy: Optional[ExposurePolicy] = None
    future: Optional[FutureWindow] = None
    control_convention: Literal["canonical", "weighted"] = "canonical"
    strata: Optional[list[tuple[int, ...]]] = None


class RunManifest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    command: str
    arguments: dict[str, Optional[Union[bool, int, float, str]]]
    seed: Optional[int] = None
    config_hash: str
    inputs: dict[str, str] = {}
    outputs: dict[str, str] = {}
    versions: dict[str, str] = {}


class CriterionResult(BaseModel):
    name: str
    passed: bool
    message: str = ""
    seconds: float = 0.0
