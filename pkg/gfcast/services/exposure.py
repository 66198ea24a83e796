import math
import logging
import numpy as np
from collections import Counter, defaultdict
from typing import Optional
from ..config import JACKKNIFE_GROUPS
from ..exceptions import EstimationError, ImputationError, PolicyError, OverlapRefusal, AllUnitsDroppedError
from ..models import (
    AnalysisConfig,
    Contribution,
    DrawTrace,
    DroppedUnit,
    ErfCell,
    ErfEstimate,
    EstimateReport,
    ExposureLawForecast,
    ExposurePolicy,
    ForecastConfig,
    ImputedHistory,
    WindowSpec,
)
from ..panel import Panel, HistoryIndex, check_query
from ..stats import TransitionTables, fit_conditional_tables, transition_parents, ordered_mean
from ..utils.utils import grid_vectors, format_vector
from .estimator import (
    AdjustmentModel,
    GFormulaModel,
    OutcomeModelBase,
    StratumTable,
    dominant_reason,
    jackknife_se,
    unit_groups,
)
from .forecaster import (
    FutureGeometry,
    impute_modifiers,
    select_future_units,
    scenario_strata,
    check_overlap,
    enforce_overlap,
    matching_se,
)
from .policies import DynamicRule, vector_law, is_dynamic, support_codes
from .runner import Runner

logger = logging.getLogger(__name__)


class NaturalExposureLaw:
    """Empirical law of the exposure window given R̄ and the pre-window exposure lags."""

    def __init__(self, index: HistoryIndex):
        self.index = index
        self.counts: dict[tuple, Counter] = defaultdict(Counter)
        for k, r_key in enumerate(index.keys("r")):
            stratum = r_key + tuple(int(v) for v in index.pre_s[k])
            self.counts[stratum][tuple(int(v) for v in index.s[k])] += 1

    def stratum(self, row: int) -> tuple[int, ...]:
        return self.index.keys("r")[row] + tuple(int(v) for v in self.index.pre_s[row])

    def law(self, row: int) -> dict[tuple[int, ...], float]:
        counts = self.counts[self.stratum(row)]
        total = sum(counts.values())
        return {v: c / total for v, c in sorted(counts.items())}


def build_erf_model(index: HistoryIndex, config: AnalysisConfig, conditioning: Optional[str] = None) -> OutcomeModelBase:
    """ERF model: exact matching on R̄ or [R̄, V̄], or the g-formula with the exposure
    as the intervened variable."""
    conditioning = conditioning or config.erf_conditioning
    if conditioning in ("r", "rv"):
        return AdjustmentModel(index, index.s, conditioning, config.min_cell)
    return GFormulaModel(index, "s", config, n_a=index.panel.schema.exposure.size)


def estimate_erf(panel: Panel, spec: WindowSpec, config: AnalysisConfig, i: int, t: int) -> ErfEstimate:
    """E[Y(s̄) | C̄ of (i, t)] for every exposure window vector on the grid.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        config (AnalysisConfig): erf_conditioning ('r', 'rv' or 'g-formula') and caps.
        i (int): Unit index.
        t (int): Query time.

    Returns:
        ErfEstimate: One cell per vector; unestimable cells carry the reason."""
    check_query(spec, t, panel.horizon)
    index = HistoryIndex(panel, spec)
    model = build_erf_model(index, config)
    key = model.key(index.row(i, t))
    counts = StratumTable(index.conditioning(model.conditioning), index.s, index.y_value, 1)
    values = panel.schema.exposure.numeric_values()
    cells = []
    for vector in grid_vectors(panel.schema.exposure.size, spec.K + 1):
        cell = ErfCell(vector=[values[c] for c in vector], codes=list(vector), count=counts.count(key, vector))
        try:
            cell.mean, cell.mc_se = model.mean(key, vector)
            cell.estimable = True
        except EstimationError as e:
            cell.reason = e.reason
        cells.append(cell)
    logger.info(f"ERF of unit {panel.units[i]} at t={t}: {sum(c.estimable for c in cells)}/{len(cells)} cells estimable.")
    return ErfEstimate(unit=panel.units[i], time=t, conditioning=config.erf_conditioning,
                       key=format_vector(key), cells=cells)


def policy_term(model: OutcomeModelBase, policy: ExposurePolicy, key, width: int, grid, natural,
                pre_actions: tuple = ()) -> tuple[float, dict]:
    """Σ_s̄ p*(s̄)·ERF(s̄) and the coefficient of every ERF cell used.

    Returns:
        tuple[float, dict]: (value, {vector or 'dynamic': (coefficient, mean, mc_se)})."""
    if policy.kind == "mixture":
        total, used = 0.0, {}
        for w, component in zip(policy.weights, policy.components):
            value, parts = policy_term(model, component, key, width, grid, natural, pre_actions)
            total += w * value
            for cell, (c, m, se) in parts.items():
                prior = used.get(cell, (0.0, m, se))[0]
                used[cell] = (prior + w * c, m, se)
        return total, used
    if policy.kind == "dynamic-conditional":
        if not isinstance(model, GFormulaModel):
            raise PolicyError("dynamic policies need the g-formula ERF")
        m, se = model.regime_mean(key, DynamicRule(policy, grid.size), pre_actions)
        return m, {"dynamic": (1.0, m, se)}
    total, used = 0.0, {}
    for vector, p in vector_law(policy, grid, width, natural).items():
        m, se = model.mean(key, vector)
        total += p * m
        used[vector] = (p, m, se)
    return total, used


def _selected_rows(index: HistoryIndex, config: AnalysisConfig) -> np.ndarray:
    if config.selection.kind == "all":
        return np.arange(len(index))
    values = np.asarray(index.panel.schema.exposure.numeric_values())[index.s]
    return np.flatnonzero(values.max(axis=1) >= config.selection.threshold)


def estimate_aee(panel: Panel, spec: WindowSpec, policy: ExposurePolicy, config: AnalysisConfig,
                 threads: Optional[int] = None) -> EstimateReport:
    """AEE over the selected observed windows: mean of Y^obs - Σ_s̄ p*(s̄)·ERF(s̄).

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        policy (ExposurePolicy): Static policy; dynamic policies are evaluated on future
            windows only.
        config (AnalysisConfig): ERF conditioning, selection and caps.
        threads (Optional[int]): Worker count.

    Returns:
        EstimateReport: Estimate with jackknife SE and per-window contributions."""
    if is_dynamic(policy):
        raise PolicyError("dynamic-conditional policies are evaluated on future windows (AEE_F) only")
    index = HistoryIndex(panel, spec)
    rows = _selected_rows(index, config)
    logger.info(f"Estimating AEE ({policy.kind}) over {len(rows)} windows, ERF by {config.erf_conditioning}.")
    grid, width = panel.schema.exposure, spec.K + 1

    def evaluate(sub: HistoryIndex):
        model = build_erf_model(sub, config)
        natural = NaturalExposureLaw(sub)

        def one(member):
            i, t = member
            row = sub.row(i, t)
            try:
                value, parts = policy_term(model, policy, model.key(row), width, grid, lambda: natural.law(row))
            except EstimationError as e:
                return member, None, e.reason
            mc = math.sqrt(sum((c * se) ** 2 for c, _, se in parts.values()))
            return member, (float(sub.y_value[row]), value, mc), None

        return one

    members = [(int(index.unit[k]), int(index.time[k])) for k in rows]
    runner = Runner(threads)
    results = runner.map("AEE contributions", evaluate(index), members)
    kept = [(m, r) for m, r, _ in results if r is not None]
    dropped = [DroppedUnit(unit=panel.units[i], time=t, reason=reason) for (i, t), r, reason in results if r is None]
    if dropped:
        logger.warning(f"{len(dropped)} windows dropped, mostly '{dominant_reason(dropped)}'.")
    if not kept:
        reason = dominant_reason(dropped)
        raise AllUnitsDroppedError(f"every window was dropped (dominant reason: {reason})", reason=reason)
    contributions = [Contribution(unit=panel.units[i], unit_index=i, time=t, observed=y, imputed=m, contrast=y - m)
                     for (i, t), (y, m, _) in kept]
    contrasts = [c.contrast for c in contributions]
    n = len(contrasts)
    value = ordered_mean(contrasts)
    mc_se = math.sqrt(sum((mc / n) ** 2 for _, (_, _, mc) in kept))

    groups = unit_groups(panel.units, config.jackknife_groups or JACKKNIFE_GROUPS)
    kept_members = [m for m, _ in kept]

    def replicate(g: int) -> Optional[float]:
        sub = index.subset(groups[index.unit] != g)
        one = evaluate(sub)
        values = []
        for member in kept_members:
            if groups[member[0]] == g:
                continue
            _, result, _ = one(member)
            if result is not None:
                values.append(result[0] - result[1])
        return ordered_mean(values) if values else None

    G = int(groups.max()) + 1
    jack_se = jackknife_se(runner.map("AEE jackknife", replicate, range(G))) if G > 1 else 0.0
    report = EstimateReport(
        estimand="AEE",
        value=value,
        se=math.sqrt(jack_se ** 2 + mc_se ** 2),
        mc_se=mc_se,
        n_treated=n,
        n_candidates=len(members),
        total=float(np.sum(contrasts)),
        mode={"policy": policy.kind, "erf_conditioning": config.erf_conditioning,
              "selection": config.selection.kind},
        dropped=dropped,
        contributions=contributions,
    )
    logger.info(f"AEE estimation finished: {value:.6g} (se {report.se:.3g}, n={n}).")
    return report


class WindowLawForecaster:
    """Chains the fitted one-step laws across the exposure window, starting from a
    pre-window history, and returns the law of the window exposure vector.

    Covariates and outcomes inside the window are integrated out with the fitted
    covariate and outcome tables."""

    def __init__(self, tables: TransitionTables, spec: WindowSpec):
        self.tables = tables
        self.spec = spec
        self.parents = transition_parents(spec)
        self._cache: dict[tuple, dict] = {}

    def _timeline(self, h: ImputedHistory) -> dict[str, dict[int, int]]:
        spec, t = self.spec, h.time
        rx, ry = list(spec.r_covariate_times(t)), list(spec.r_outcome_times(t))
        H = spec.anchor(t)
        timeline = {"x": dict(zip(rx, h.r_bar[:len(rx)])), "y": dict(zip(ry, h.r_bar[len(rx):])), "a": {}}
        for k, code in enumerate(h.pre_actions, start=1):
            if code >= 0:
                timeline["a"][H - k] = code
        return timeline

    def _key(self, timeline, tau, plist) -> tuple[int, ...]:
        key = []
        for var, lag in plist:
            code = timeline[var].get(tau - lag)
            if code is None:
                raise ImputationError(f"{var} at time {tau - lag} is outside the pre-window history",
                                      variable=var, time=tau - lag)
            key.append(code)
        return tuple(key)

    def _law(self, table, timeline, tau, plist) -> np.ndarray:
        key = self._key(timeline, tau, plist)
        law = table.law(key)
        if law is None:
            raise ImputationError(f"{table.name} cell {key} has {table.count(key)} rows < min_cell={table.min_cell}",
                                  table=table.name, cell=key)
        return law

    def law(self, h: ImputedHistory) -> dict[tuple[int, ...], float]:
        cache_key = (h.time - self.spec.anchor(h.time), h.r_bar, h.pre_actions)
        if cache_key in self._cache:
            return self._cache[cache_key]
        spec = self.spec
        window = list(spec.window_times(h.time))
        paths = [(self._timeline(h), 1.0)]
        for k, tau in enumerate(window):
            expanded = []
            for timeline, p in paths:
                for x, px in self._branch(timeline, "x", tau, k >= 1):
                    with_x = self._set(timeline, "x", tau, x)
                    for a, pa in self._branch(with_x, "a", tau, True):
                        with_a = self._set(with_x, "a", tau, a)
                        needs_y = tau < window[-1] and tau not in with_a["y"]
                        for y, py in self._branch(with_a, "y", tau, needs_y):
                            expanded.append((self._set(with_a, "y", tau, y), p * px * pa * py))
            paths = expanded
        law: dict[tuple[int, ...], float] = defaultdict(float)
        for timeline, p in paths:
            law[tuple(timeline["a"][tau] for tau in window)] += p
        self._cache[cache_key] = dict(law)
        return self._cache[cache_key]

    def _branch(self, timeline, var, tau, sample: bool):
        if not sample:
            return [(None, 1.0)]
        table = {"x": self.tables.covariate, "a": self.tables.action, "y": self.tables.outcome}[var]
        law = self._law(table, timeline, tau, self.parents[var])
        return [(int(c), float(law[c])) for c in np.flatnonzero(law)]

    @staticmethod
    def _set(timeline, var, tau, value):
        if value is None:
            return timeline
        updated = dict(timeline)
        updated[var] = {**timeline[var], tau: value}
        return updated


def forecast_exposure_law(panel: Panel, spec: WindowSpec, future, n_draws: int, seed: int,
                          config: Optional[AnalysisConfig] = None, threads: Optional[int] = None) -> list[ExposureLawForecast]:
    """Natural exposure-window law of every future (i, t), averaged over imputation draws.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        future (FutureWindow): Future geometry.
        n_draws (int): Imputation draws.
        seed (int): Imputation seed.
        config (Optional[AnalysisConfig]): Supplies min_cell.
        threads (Optional[int]): Worker count.

    Returns:
        list[ExposureLawForecast]: Laws keyed by the '|'-joined exposure values."""
    config = config or AnalysisConfig(window=spec)
    geometry = FutureGeometry(future, spec, panel.horizon)
    tables = fit_conditional_tables(panel, spec, config.min_cell, "s")
    draws = impute_modifiers(panel, spec, geometry, n_draws, seed, tables, "s", config.min_cell, threads)
    forecaster = WindowLawForecaster(tables, spec)
    values = panel.schema.exposure.numeric_values()
    sums: dict[tuple[int, int], dict] = defaultdict(lambda: defaultdict(float))
    seen: Counter = Counter()
    for draw in draws:
        for h in draw.histories:
            try:
                law = forecaster.law(h)
            except ImputationError as e:
                logger.warning(f"Exposure law of unit {panel.units[h.unit]} at t={h.time} skipped in draw {draw.draw}: "
                               f"{e.message}")
                continue
            seen[(h.unit, h.time)] += 1
            for vector, p in law.items():
                sums[(h.unit, h.time)][vector] += p
    forecasts = []
    for (i, t), law in sorted(sums.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        n = seen[(i, t)]
        forecasts.append(ExposureLawForecast(
            unit=panel.units[i], unit_index=i, time=t, n_draws=n,
            law={format_vector([values[c] for c in v]): p / n for v, p in sorted(law.items())}))
    logger.info(f"Exposure laws forecast for {len(forecasts)} future windows.")
    return forecasts


def _policy_support_violations(policy: ExposurePolicy, grid, width: int, observed: set, observed_codes: set):
    """Policy vectors (or dynamic codes) outside the observed exposure support."""
    if policy.kind == "mixture":
        return [v for c in policy.components for v in _policy_support_violations(c, grid, width, observed, observed_codes)]
    if policy.kind == "dynamic-conditional":
        return [(c,) for c in sorted(support_codes(policy) - observed_codes)]
    if policy.kind in ("natural", "truncate-below"):
        return []
    return [v for v in vector_law(policy, grid, width) if v not in observed]


def forecast_aee_f(panel: Panel, spec: WindowSpec, config: AnalysisConfig, forecast: ForecastConfig,
                   policy: ExposurePolicy, force: bool = False, threads: Optional[int] = None) -> EstimateReport:
    """AEE_F: per future (i, t) and draw, Σ ERF·p̂_natural - Σ ERF·p*, averaged over
    the selected units of each draw and then over the completed draws. Dynamic policies use the g-formula with the policy as a
    stochastic regime.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        config (AnalysisConfig): ERF conditioning ('rv' falls back to 'r' since V̄ is not
            imputed), min_cell and caps.
        forecast (ForecastConfig): Future window, scenario, draws, overlap threshold.
        policy (ExposurePolicy): p*.
        force (bool): Waive overlap and policy-support refusals.
        threads (Optional[int]): Worker count.

    Returns:
        EstimateReport: Pooled estimate, draw trace and overlap diagnostics."""
    seed = forecast.seed if forecast.seed is not None else (config.seed or 0)
    geometry = FutureGeometry(forecast.future, spec, panel.horizon)
    grid, width = panel.schema.exposure, spec.K + 1
    logger.info(f"Forecasting AEE_F ({policy.kind}) from origin {geometry.origin}.")
    index = HistoryIndex(panel, spec)
    tables = fit_conditional_tables(panel, spec, config.min_cell, "s")
    draws = impute_modifiers(panel, spec, geometry, forecast.n_draws, seed, tables, "s", config.min_cell, threads)
    past = frozenset(index.keys("r")[k] for k in _selected_rows(index, config))
    explicit = frozenset(scenario_strata(forecast.scenario, panel.schema, spec))
    selection = select_future_units(forecast.scenario, geometry, draws, past, explicit)
    overlap = check_overlap(selection, index.support(), explicit)
    enforce_overlap(overlap, forecast.overlap_threshold, force)
    observed = {tuple(int(v) for v in row) for row in index.s}
    off = _policy_support_violations(policy, grid, width, observed, set(int(v) for v in np.unique(index.s)))
    if off:
        message = f"policy puts mass outside the observed exposure support: {[format_vector(v) for v in off[:5]]}"
        if not force:
            raise OverlapRefusal(message, vectors=len(off))
        logger.warning(f"Forced past refusal: {message}")

    conditioning = "g-formula" if is_dynamic(policy) or config.erf_conditioning == "g-formula" else "r"
    model = build_erf_model(index, config, conditioning)
    law_forecaster = WindowLawForecaster(tables, spec)
    traces, dropped, pairs = [], [], []
    coefficients: dict[tuple, list] = defaultdict(lambda: [0.0, 0.0, 0.0])
    for draw in draws:
        if draw.aborted is not None:
            traces.append(DrawTrace(draw=draw.draw, aborted=draw.aborted))
            continue
        values = []
        draw_coefficients: dict[tuple, float] = defaultdict(float)
        for h in selection[draw.draw]:
            try:
                natural_law = law_forecaster.law(h)
                natural_value, natural_parts = policy_term(model, policy.model_copy(update={"kind": "natural"}),
                                                           h.r_bar, width, grid, lambda: natural_law, h.pre_actions)
                if policy.kind == "natural":
                    policy_value, policy_parts = natural_value, natural_parts
                else:
                    policy_value, policy_parts = policy_term(model, policy, h.r_bar, width, grid,
                                                             lambda: natural_law, h.pre_actions)
            except EstimationError as e:
                dropped.append(DroppedUnit(unit=panel.units[h.unit], time=h.time, reason=e.reason, draw=draw.draw))
                continue
            contrast = natural_value - policy_value
            values.append(contrast)
            pairs.append((h, contrast, natural_value))
            for sign, parts in ((1.0, natural_parts), (-1.0, policy_parts)):
                for cell, (c, _, se) in parts.items():
                    entry = coefficients[(h.r_bar, cell)]
                    draw_coefficients[(h.r_bar, cell)] += sign * c
                    entry[1] = model.variance_of_mean(h.r_bar, cell) if isinstance(model, AdjustmentModel) else 0.0
                    entry[2] = se ** 2
        for key, c in draw_coefficients.items():
            coefficients[key][0] += c / len(values)
        traces.append(DrawTrace(draw=draw.draw, value=ordered_mean(values) if values else None, n_pairs=len(values),
                                aborted=None if values else "empty-selection"))
    if dropped:
        logger.warning(f"{len(dropped)} (unit, draw) contributions dropped, mostly '{dominant_reason(dropped)}'.")
    if not pairs:
        raise EstimationError("no future contribution could be computed",
                              candidates=sum(len(v) for v in selection.values()))
    N = len(pairs)
    draw_values = [d.value for d in traces if d.value is not None]
    value = ordered_mean(draw_values)
    n_done = len(draw_values)
    draw_se = float(np.std(draw_values, ddof=1) / math.sqrt(len(draw_values))) if len(draw_values) > 1 else 0.0
    weights = {k: v[0] / n_done for k, v in coefficients.items()}
    match_se = matching_se(weights, {k: v[1] for k, v in coefficients.items()})
    mc_se = matching_se(weights, {k: v[2] for k, v in coefficients.items()})
    per_unit: dict[tuple, list] = defaultdict(list)
    for h, c, m in pairs:
        per_unit[(h.unit, h.time)].append((c, m))
    contributions = [
        Contribution(unit=panel.units[i], unit_index=i, time=t,
                     observed=float(panel.y_values[i, t - 1]) if t <= panel.horizon else None,
                     imputed=ordered_mean(m for _, m in items), contrast=ordered_mean(c for c, _ in items),
                     weight=len(items) / n_done)
        for (i, t), items in sorted(per_unit.items(), key=lambda kv: (kv[0][1], kv[0][0]))
    ]
    report = EstimateReport(
        estimand="AEE_F",
        value=value,
        se=math.sqrt(draw_se ** 2 + match_se ** 2 + mc_se ** 2),
        mc_se=math.sqrt(draw_se ** 2 + mc_se ** 2),
        n_treated=N,
        n_candidates=sum(len(v) for v in selection.values()),
        total=float(np.sum([c for _, c, _ in pairs])) / n_done,
        mode={"policy": policy.kind, "erf_conditioning": conditioning, "scenario": forecast.scenario.rule,
              "imputation": "sampled" if geometry.needs_imputation else "none", "origin": str(geometry.origin)},
        dropped=dropped,
        contributions=contributions,
        overlap=overlap,
        draws=traces,
    )
    logger.info(f"AEE_F forecast finished: {value:.6g} (se {report.se:.3g}, {N} unit-draws).")
    return report
