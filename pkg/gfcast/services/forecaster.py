import math
import logging
import numpy as np
from collections import defaultdict
from typing import Optional, Union
from ..config import N_DRAWS, MIN_CELL
from ..exceptions import ConfigError, ImputationError, EstimationError, OverlapRefusal, WindowError
from ..mapping import TreatmentMapper
from ..models import (
    AnalysisConfig,
    Contribution,
    DrawTrace,
    DroppedUnit,
    EstimateReport,
    ForecastConfig,
    FutureWindow,
    ImputedDraw,
    ImputedHistory,
    OverlapReport,
    PanelSchema,
    ScenarioSpec,
    WindowSpec,
)
from ..panel import Panel, HistoryIndex, build_unit_sets
from ..stats import ConditionalTable, TransitionTables, fit_conditional_tables, transition_parents, ordered_mean
from ..utils.utils import IMPUTE, stream, sample_rows, format_vector
from .estimator import AdjustmentModel, build_model, potential_outcome
from .runner import Runner

logger = logging.getLogger(__name__)


class FutureGeometry:
    """Resolved future window: outcome times origin+F+L .. origin+F+T_F and the
    treatment rule after the origin.

    Attributes:
        origin (int): Forecast origin (T unless back-testing).
        horizon (int): Last observed time T.
        outcome_times (range): 𝒯^F.
        treatment_times (range): 𝒯_Z^F.
        imputation_end (int): Last time whose covariates some R̄ needs."""

    def __init__(self, future: FutureWindow, spec: WindowSpec, horizon: int):
        self.future = future
        self.spec = spec
        self.horizon = horizon
        self.origin = horizon if future.origin is None else future.origin
        if not 1 <= self.origin <= horizon:
            raise ConfigError(f"forecast origin {self.origin} must lie in [1, T={horizon}]")
        T_F = spec.L if future.T_F is None else future.T_F
        if not spec.L <= T_F <= future.T_Z + spec.K:
            raise ConfigError(f"T_F={T_F} violates L <= T_F <= T_Z+K ({spec.L} <= T_F <= {future.T_Z + spec.K})")
        if isinstance(future.schedule, list) and len(future.schedule) != future.F - 1:
            raise ConfigError(f"gap schedule has {len(future.schedule)} entries, F-1 = {future.F - 1}")
        self.T_F = T_F
        start = self.origin + future.F
        self.outcome_times = range(start + spec.L, start + T_F + 1)
        self.treatment_times = range(start, start + future.T_Z + 1)
        self.fixed_time = start + spec.L
        for t in self.outcome_times:
            if spec.earliest(t) < 1:
                raise WindowError(f"future time {t} needs history before time 1", t=t)
        self.imputation_end = max(spec.anchor(t) for t in self.outcome_times)

    @property
    def backtest(self) -> bool:
        return self.origin < self.horizon

    @property
    def needs_imputation(self) -> bool:
        return self.imputation_end > self.horizon

    def gap_action(self, tau: int) -> int:
        """Treatment after the origin: the supplied gap schedule, zero elsewhere."""
        k = tau - self.origin - 1
        schedule = self.future.schedule
        if isinstance(schedule, list) and 0 <= k < len(schedule):
            return int(schedule[k])
        return 0


def _draw_code(table: ConditionalTable, key: tuple, u: float) -> int:
    law = table.law(key)
    if law is None:
        raise ImputationError(f"{table.name} cell {key} has {table.count(key)} rows < min_cell={table.min_cell}",
                              table=table.name, cell=key)
    return int(sample_rows(law[None, :], np.array([u]))[0])


def _histories(columns: dict, spec: WindowSpec, times, horizon: int, draw: int, lags: int) -> list[ImputedHistory]:
    histories = []
    x, a, y = columns["x"], columns["a"], columns["y"]
    for t in times:
        rx, ry = list(spec.r_covariate_times(t)), list(spec.r_outcome_times(t))
        H = spec.anchor(t)
        provenance = tuple("observed" if tau <= horizon else "imputed" for tau in rx + ry)
        for i in range(x.shape[0]):
            r_bar = tuple(int(x[i, tau - 1]) for tau in rx) + tuple(int(y[i, tau - 1]) for tau in ry)
            pre = tuple(int(a[i, H - k - 1]) if H - k >= 1 else -1 for k in range(1, lags + 1))
            histories.append(ImputedHistory(unit=i, time=t, draw=draw, r_bar=r_bar, provenance=provenance,
                                            pre_actions=pre))
    return histories


def impute_modifiers(panel: Panel, spec: WindowSpec, future: Union[FutureWindow, FutureGeometry],
                     n_draws: int = N_DRAWS, seed: int = 0, tables: Optional[TransitionTables] = None,
                     action: str = "z", min_cell: int = MIN_CELL, threads: Optional[int] = None) -> list[ImputedDraw]:
    """Sample the pre-window histories of every future (i, t) forward from T+1.

    Each draw walks the times after T in order and samples, per unit, the covariate
    state, then the action, then the outcome from the fitted one-step tables. The
    treatment follows the gap rule (zero or the supplied schedule); an exposure follows
    its fitted natural law. Entries at times <= T keep the observed values. When no
    R̄ reaches beyond T a single draw is returned.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry and transition lag orders.
        future (FutureWindow | FutureGeometry): Future geometry.
        n_draws (int): Draws.
        seed (int): Draw d uses its own stream of this seed.
        tables (Optional[TransitionTables]): Fitted tables (fitted here when omitted).
        action (str): 'z' or 's'.
        min_cell (int): Cell threshold used when fitting.
        threads (Optional[int]): Worker count.

    Returns:
        list[ImputedDraw]: One entry per draw; an unestimable cell aborts its draw."""
    geometry = future if isinstance(future, FutureGeometry) else FutureGeometry(future, spec, panel.horizon)
    tables = tables or fit_conditional_tables(panel, spec, min_cell, action)
    T, I = panel.horizon, panel.n_units
    end = max(geometry.imputation_end, T)
    parents = transition_parents(spec)
    observed = {"x": panel.x_joint, "a": panel.action(action), "y": panel.y}
    if not geometry.needs_imputation:
        logger.info("Every pre-window history is observed, no imputation needed.")
        columns = {k: np.asarray(v) for k, v in observed.items()}
        return [ImputedDraw(draw=0, histories=_histories(columns, spec, geometry.outcome_times, T, 0, spec.L_ss))]

    def key(columns, i, tau, plist):
        return tuple(int(columns[var][i, tau - 1 - lag]) for var, lag in plist)

    def run(draw: int) -> ImputedDraw:
        columns = {}
        for name, matrix in observed.items():
            extended = np.zeros((I, end), dtype=np.int64)
            extended[:, :T] = matrix
            columns[name] = extended
        u = stream(seed, IMPUTE, draw).random((I, end - T, 3))
        try:
            for tau in range(T + 1, end + 1):
                if tau - 1 - max(lag for plist in parents.values() for _, lag in plist) < 0:
                    raise ImputationError(f"transition lags reach before time 1 at time {tau}")
                step = tau - T - 1
                for i in range(I):
                    columns["x"][i, tau - 1] = _draw_code(tables.covariate, key(columns, i, tau, parents["x"]),
                                                          u[i, step, 0])
                    if action == "z":
                        columns["a"][i, tau - 1] = geometry.gap_action(tau)
                    else:
                        columns["a"][i, tau - 1] = _draw_code(tables.action, key(columns, i, tau, parents["a"]),
                                                              u[i, step, 1])
                    columns["y"][i, tau - 1] = _draw_code(tables.outcome, key(columns, i, tau, parents["y"]),
                                                          u[i, step, 2])
        except ImputationError as e:
            logger.warning(f"Imputation draw {draw} aborted: {e.message}")
            return ImputedDraw(draw=draw, aborted=e.message)
        return ImputedDraw(draw=draw, histories=_histories(columns, spec, geometry.outcome_times, T, draw,
                                                           spec.L_ss))

    return Runner(threads).map("modifier imputation", run, range(n_draws))


def scenario_strata(scenario: ScenarioSpec, schema: PanelSchema, spec: WindowSpec) -> set[tuple[int, ...]]:
    """Convert explicit R̄ values (grid values) into R̄ code keys."""
    if scenario.rule != "explicit-R*":
        return set()
    P = len(schema.covariates)
    n_rx = spec.L_x - spec.K + 1
    n_ry = len(spec.r_outcome_times(spec.first_query_time))
    strata = set()
    for values in scenario.values:
        if len(values) != n_rx * P + n_ry:
            raise ConfigError(f"explicit R̄ {values} has {len(values)} entries, expected {n_rx * P + n_ry}")
        try:
            codes = []
            for k in range(n_rx):
                per_time = [grid.code_of(v) for grid, v in zip(schema.covariates, values[k * P:(k + 1) * P])]
                codes.append(int(np.ravel_multi_index(tuple(per_time), schema.covariate_sizes)))
            codes += [schema.outcome.code_of(v) for v in values[n_rx * P:]]
        except ValueError as e:
            raise ConfigError(f"explicit R̄ value off the declared grids: {e}")
        strata.add(tuple(codes))
    return strata


def select_future_units(scenario: ScenarioSpec, geometry: FutureGeometry, draws: list[ImputedDraw],
                        past_strata: frozenset = frozenset(), explicit_strata: frozenset = frozenset(),
                        treated: frozenset = frozenset()) -> dict[int, list[ImputedHistory]]:
    """U_1^F per draw.

    Args:
        scenario (ScenarioSpec): Selection rule.
        geometry (FutureGeometry): Resolved future window.
        draws (list[ImputedDraw]): Imputed histories.
        past_strata (frozenset): R̄ values of U_1^obs, for match-past-R.
        explicit_strata (frozenset): Scenario R̄ codes, for explicit-R*.
        treated (frozenset): Observed treated (i, t), for observed-treated.

    Returns:
        dict[int, list[ImputedHistory]]: Selected histories of every completed draw;
            an empty selection is a legal result."""
    match scenario.rule:
        case "fixed-time":
            keep = lambda h: h.time == geometry.fixed_time
        case "match-past-R":
            keep = lambda h: h.r_bar in past_strata
        case "explicit-R*":
            keep = lambda h: h.r_bar in explicit_strata
        case _:
            keep = lambda h: (h.unit, h.time) in treated
    selection = {draw.draw: [h for h in draw.histories if keep(h)] for draw in draws if draw.aborted is None}
    sizes = [len(v) for v in selection.values()]
    logger.info(f"Future units selected by {scenario.rule}: {ordered_mean(sizes) if sizes else 0:.3g} per draw.")
    return selection


def check_overlap(selection: dict[int, list[ImputedHistory]], support: set,
                  explicit_strata: frozenset = frozenset()) -> OverlapReport:
    """Flag imputed R̄ values absent from supp(U^obs). Explicit scenario values off the
    support count as violations even when no draw realises them."""
    checked, violations = 0, 0
    off = set()
    for histories in selection.values():
        for h in histories:
            checked += 1
            if h.r_bar not in support:
                violations += 1
                off.add(h.r_bar)
    for stratum in sorted(explicit_strata):
        checked += 1
        if stratum not in support:
            violations += 1
            off.add(stratum)
    fraction = violations / checked if checked else 0.0
    return OverlapReport(n_checked=checked, n_violations=violations, violation_fraction=fraction,
                         off_support=sorted(format_vector(k) for k in off))


def enforce_overlap(overlap: OverlapReport, threshold: float, force: bool):
    if overlap.violation_fraction > threshold:
        message = (f"overlap violation fraction {overlap.violation_fraction:.3g} exceeds {threshold:.3g} "
                   f"(off-support R̄: {', '.join(overlap.off_support[:5])})")
        if not force:
            raise OverlapRefusal(message, fraction=overlap.violation_fraction, threshold=threshold)
        logger.warning(f"Forced past refusal: {message}")


def matching_se(weights: dict, variances: dict) -> float:
    """SE of Σ_r c_r·m(r) for independent stratum means with variances v(r)."""
    return math.sqrt(sum(c ** 2 * variances[r] for r, c in weights.items()))


def forecast_att_f(panel: Panel, spec: WindowSpec, mapper: TreatmentMapper, config: AnalysisConfig,
                   forecast: ForecastConfig, force: bool = False, threads: Optional[int] = None) -> EstimateReport:
    """ATT_F on a future window: impute R̂ per draw, select U_1^F, check overlap, then
    average E[Y | D=1, R̂] - E[Y | D=0, R̂] over the selected units of each draw, then
    over the completed draws.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        mapper (TreatmentMapper): h(.) rule.
        config (AnalysisConfig): Min cell, caps, convention.
        forecast (ForecastConfig): Future window, scenario, draws, overlap threshold and
            matching method ('adjustment' or 'g-formula').
        force (bool): Waive an overlap refusal.
        threads (Optional[int]): Worker count.

    Returns:
        EstimateReport: Mean of the per-draw estimates, draw trace and overlap diagnostics."""
    seed = forecast.seed if forecast.seed is not None else (config.seed or 0)
    geometry = FutureGeometry(forecast.future, spec, panel.horizon)
    logger.info(f"Forecasting ATT_F at times {geometry.outcome_times.start}..{geometry.outcome_times.stop - 1} "
                f"from origin {geometry.origin}.")
    index = HistoryIndex(panel, spec)
    tables = fit_conditional_tables(panel, spec, config.min_cell, "z")
    draws = impute_modifiers(panel, spec, geometry, forecast.n_draws, seed, tables, "z", config.min_cell, threads)
    _, treated = build_unit_sets(panel, spec, mapper)
    treated_rows = [index.row(i, t) for i, t in treated.members]
    past = frozenset(index.keys("r")[k] for k in treated_rows if k is not None)
    explicit = frozenset(scenario_strata(forecast.scenario, panel.schema, spec))
    selection = select_future_units(forecast.scenario, geometry, draws, past, explicit,
                                    frozenset(treated.members))
    overlap = check_overlap(selection, index.support(), explicit)
    enforce_overlap(overlap, forecast.overlap_threshold, force)

    matching = config.model_copy(update={"method": forecast.method, "conditioning": "r"})
    model = build_model(matching, index, mapper, conditioning="r")
    imputed: dict[tuple, tuple] = {}

    def contrast(r_bar):
        if r_bar not in imputed:
            try:
                m1 = potential_outcome(model, mapper, r_bar, 1, config.control_convention)
                m0 = potential_outcome(model, mapper, r_bar, 0, config.control_convention)
                imputed[r_bar] = (m1, m0, None)
            except EstimationError as e:
                imputed[r_bar] = (None, None, e.reason)
        return imputed[r_bar]

    traces, dropped = [], []
    pairs: list[tuple[int, ImputedHistory, float, float]] = []
    for draw in draws:
        if draw.aborted is not None:
            traces.append(DrawTrace(draw=draw.draw, aborted=draw.aborted))
            continue
        values = []
        for h in selection[draw.draw]:
            m1, m0, reason = contrast(h.r_bar)
            if reason is not None:
                dropped.append(DroppedUnit(unit=panel.units[h.unit], time=h.time, reason=reason, draw=draw.draw))
                continue
            values.append(m1[0] - m0[0])
            pairs.append((draw.draw, h, m1[0] - m0[0], m0[0]))
        traces.append(DrawTrace(draw=draw.draw, value=ordered_mean(values) if values else None, n_pairs=len(values),
                                aborted=None if values else "empty-selection"))
    if dropped:
        logger.warning(f"{len(dropped)} (unit, draw) contributions dropped.")
    if not pairs:
        raise EstimationError("no future contribution could be computed",
                              candidates=sum(len(v) for v in selection.values()))
    N = len(pairs)
    draw_values = [d.value for d in traces if d.value is not None]
    value = ordered_mean(draw_values)
    n_done = len(draw_values)
    draw_pairs = {d.draw: d.n_pairs for d in traces if d.value is not None}
    draw_se = float(np.std(draw_values, ddof=1) / math.sqrt(len(draw_values))) if len(draw_values) > 1 else 0.0
    weights: dict[tuple, float] = defaultdict(float)
    for draw, h, _, _ in pairs:
        weights[h.r_bar] += 1.0 / (n_done * draw_pairs[draw])
    if isinstance(model, AdjustmentModel):
        variances = {r: model.variance_of_mean(r, (1,)) + model.variance_of_mean(r, (0,)) for r in weights}
        match_se, mc_se = matching_se(weights, variances), 0.0
    else:
        variances = {r: imputed[r][0][1] ** 2 + imputed[r][1][1] ** 2 for r in weights}
        match_se, mc_se = 0.0, matching_se(weights, variances)
    per_unit: dict[tuple, list] = defaultdict(list)
    for _, h, c, m0 in pairs:
        per_unit[(h.unit, h.time)].append((c, m0))
    contributions = []
    for (i, t), items in sorted(per_unit.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        observed = float(panel.y_values[i, t - 1]) if t <= panel.horizon else None
        contributions.append(Contribution(unit=panel.units[i], unit_index=i, time=t, observed=observed,
                                          imputed=ordered_mean(m for _, m in items),
                                          contrast=ordered_mean(c for c, _ in items), weight=len(items) / n_done))
    report = EstimateReport(
        estimand="ATT_F",
        value=value,
        se=math.sqrt(draw_se ** 2 + match_se ** 2 + mc_se ** 2),
        mc_se=math.sqrt(draw_se ** 2 + mc_se ** 2),
        n_treated=N,
        n_candidates=sum(len(v) for v in selection.values()),
        total=float(np.sum([c for _, _, c, _ in pairs])) / n_done,
        mode={"method": forecast.method, "scenario": forecast.scenario.rule, "control_convention": config.control_convention,
              "mapper": mapper.describe(), "imputation": "sampled" if geometry.needs_imputation else "none",
              "origin": str(geometry.origin)},
        dropped=dropped,
        contributions=contributions,
        overlap=overlap,
        draws=traces,
    )
    logger.info(f"ATT_F forecast finished: {value:.6g} (se {report.se:.3g}, {N} unit-draws).")
    return report
