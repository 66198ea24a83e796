import math
import logging
import numpy as np
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from typing import Iterable, Optional, Sequence, Union
from ..config import JACKKNIFE_GROUPS, MIN_CELL
from ..exceptions import (
    EstimationError,
    UnestimableFactorError,
    BelowMinCellError,
    NoControlMatchError,
    AllUnitsDroppedError,
    PolicyError,
)
from ..mapping import TreatmentMapper
from ..models import AnalysisConfig, Contribution, DroppedUnit, EstimateReport, WindowSpec
from ..panel import Panel, HistoryIndex, build_unit_sets, check_query
from ..stats import ConditionalTable, OutcomeTable, fit_conditional_tables, dependence_strata, ordered_mean
from ..utils.utils import GFORMULA, stream, key_id, sample_rows
from .policies import DynamicRule
from .runner import Runner

logger = logging.getLogger(__name__)

Regime = Union[tuple[int, ...], DynamicRule]


class StratumTable:
    """Outcome means per (conditioning key, arm), usable only from min_cell rows on.

    Attributes:
        min_cell (int): Rows a cell needs before its mean is used.
        table (OutcomeTable): Sums, squares and counts keyed by key + arm."""

    def __init__(self, keys: np.ndarray, arms: np.ndarray, values: np.ndarray, min_cell: int):
        self.min_cell = min_cell
        self.table = OutcomeTable(np.hstack([keys, arms]), values)

    def count(self, key, arm) -> int:
        return self.table.count(tuple(key) + tuple(arm))

    def mean(self, key, arm) -> float:
        cell = tuple(key) + tuple(arm)
        n = self.table.count(cell)
        if n == 0:
            raise NoControlMatchError(f"no observed rows in stratum {tuple(key)} with arm {tuple(arm)}",
                                      cell=cell)
        if n < self.min_cell:
            raise BelowMinCellError(f"stratum {tuple(key)} with arm {tuple(arm)} has {n} rows < "
                                    f"min_cell={self.min_cell}", cell=cell, count=n)
        return self.table.mean(cell)

    def variance_of_mean(self, key, arm) -> float:
        cell = tuple(key) + tuple(arm)
        n = self.table.count(cell)
        return self.table.variance(cell) / n if n else 0.0


class OutcomeModelBase(ABC):
    """Abstract base class for the models imputing E[Y | arm, stratum]."""
    method = ""

    def __init__(self, index: HistoryIndex, conditioning: str):
        self.index = index
        self.conditioning = conditioning

    def key(self, row: int) -> tuple[int, ...]:
        """Conditioning key of an index row."""
        return self.index.keys(self.conditioning)[row]

    @abstractmethod
    def mean(self, key, arm) -> tuple[float, float]:
        """Imputed mean and its Monte Carlo standard error."""
        pass


class AdjustmentModel(OutcomeModelBase):
    """Exact-match covariate adjustment: the empirical mean of Y among rows sharing
    the conditioning key and the arm."""
    method = "adjustment"

    def __init__(self, index: HistoryIndex, arms: np.ndarray, conditioning: str, min_cell: int):
        super().__init__(index, conditioning)
        arms = np.asarray(arms).reshape(len(index), -1)
        self.strata = StratumTable(index.conditioning(conditioning), arms, index.y_value, min_cell)

    def mean(self, key, arm):
        return self.strata.mean(key, arm), 0.0

    def variance_of_mean(self, key, arm) -> float:
        return self.strata.variance_of_mean(key, arm)


class WindowFactors:
    """Fitted factors of the g-formula over the carry-over window.

    Steps run in time order over H..t-B: the covariate state at H+k (k >= 1), the
    action at H+k, then the outcome at H+k when it belongs to V̄. Every factor is keyed
    by R̄ followed by the actions, covariates and outcomes already realised in the
    window, so a path's key prefix always equals the factor's parent set.

    Attributes:
        steps (list[tuple]): (variable, k, table) in time order; action tables are None
            until a dynamic regime needs the natural action law.
        terminal (OutcomeTable): Mean of Y given the full history."""

    def __init__(self, index: HistoryIndex, action: str, min_cell: int, n_x: int, n_y: int, n_a: int):
        spec = index.spec
        self.index = index
        self.action = action
        self.min_cell = min_cell
        self.n_x, self.n_y, self.n_a = n_x, n_y, n_a
        self.n_rx = len(range(spec.L_x - spec.K + 1))
        self.y_offset = spec.y_offset
        a = index.window(action)
        n_vy = index.vy.shape[1]
        self.steps: list[tuple[str, int, Optional[ConditionalTable]]] = []
        done = {"a": 0, "x": 0, "y": 0}
        for k in range(spec.K + 1):
            if k >= 1:
                self.steps.append(("x", k, self._fit(f"x@H+{k}", a, done, index.vx[:, k - 1], n_x)))
                done["x"] += 1
            self.steps.append(("a", k, None))
            done["a"] += 1
            j = k - self.y_offset
            if 0 <= j < n_vy:
                self.steps.append(("y", k, self._fit(f"y@H+{k}", a, done, index.vy[:, j], n_y)))
                done["y"] += 1
        self.terminal = OutcomeTable(np.hstack([index.r, a, index.vx, index.vy]), index.y_value)
        self._action_tables: dict[int, ConditionalTable] = {}

    def _parents(self, a: np.ndarray, done: dict) -> np.ndarray:
        return np.hstack([self.index.r, a[:, :done["a"]], self.index.vx[:, :done["x"]],
                          self.index.vy[:, :done["y"]]])

    def _fit(self, name: str, a: np.ndarray, done: dict, child: np.ndarray, n_categories: int):
        parents = self._parents(a, done)
        return ConditionalTable.fit(name, list(range(parents.shape[1])), parents, child, n_categories,
                                    self.min_cell)

    def action_table(self, k: int) -> ConditionalTable:
        """Natural law of the action at H+k given R̄, the pre-window action lags and the
        realised window history."""
        if k not in self._action_tables:
            a = self.index.window(self.action)
            done = {"a": k, "x": k, "y": max(0, min(k - self.y_offset, self.index.vy.shape[1]))}
            parents = np.hstack([self.index.r, self.index.pre_s, a[:, :k], self.index.vx[:, :k],
                                 self.index.vy[:, :done["y"]]])
            self._action_tables[k] = ConditionalTable.fit(f"a@H+{k}", list(range(parents.shape[1])),
                                                          parents, a[:, k], self.n_a, self.min_cell)
        return self._action_tables[k]

    def path_count(self, dynamic: bool) -> int:
        sizes = {"x": self.n_x, "y": self.n_y, "a": self.n_a if dynamic else 1}
        return math.prod(sizes[var] for var, _, _ in self.steps)


class GFormulaModel(OutcomeModelBase):
    """Sequential g-formula on R̄: the nested sum over covariate and outcome paths in
    the window of the product of fitted factors times the terminal mean.

    Exact when the path count is at most the enumeration cap, otherwise Monte Carlo
    integration over mc_paths sampled paths with its standard error.

    Attributes:
        factors (WindowFactors): Fitted factors.
        cap (int): Enumeration cap.
        mc_paths (int): Monte Carlo paths per evaluation.
        seed (int): Seed of the integration streams."""
    method = "g-formula"

    def __init__(self, index: HistoryIndex, action: str, config: AnalysisConfig, n_a: int = 2):
        super().__init__(index, "r")
        schema = index.panel.schema
        self.factors = WindowFactors(index, action, config.min_cell, schema.n_covariate_states,
                                     schema.outcome.size, n_a)
        self.min_cell = config.min_cell
        self.cap = config.enumeration_cap
        self.mc_paths = config.mc_paths
        self.seed = config.seed or 0
        self.y_values = np.asarray(schema.outcome.numeric_values())
        self._cache: dict[tuple, tuple[float, float]] = {}
        self._controls: Optional[dict[tuple, Counter]] = None

    def mean(self, key, arm):
        return self.regime_mean(key, tuple(int(v) for v in arm))

    def regime_mean(self, key, regime: Regime, pre_actions: tuple[int, ...] = ()) -> tuple[float, float]:
        """E[Y(regime) | R̄ = key].

        Args:
            key (tuple): R̄ codes.
            regime: Window action codes, or a first-order DynamicRule.
            pre_actions (tuple): Action codes at H-1, H-2, ..., read by dynamic regimes.

        Returns:
            tuple[float, float]: (value, Monte Carlo SE), SE 0 when exact."""
        dynamic = isinstance(regime, DynamicRule)
        if dynamic and not regime.first_order:
            raise PolicyError("the g-formula evaluates first-order dynamic policies only")
        cache_key = (tuple(key), regime.key() if dynamic else tuple(regime), tuple(pre_actions))
        if cache_key not in self._cache:
            if self.factors.path_count(dynamic) <= self.cap:
                self._cache[cache_key] = (self._exact(tuple(key), regime, tuple(pre_actions)), 0.0)
            else:
                self._cache[cache_key] = self._monte_carlo(tuple(key), regime, tuple(pre_actions), key_id(cache_key))
        return self._cache[cache_key]

    def _step_law(self, key, regime, pre_actions, step, history) -> np.ndarray:
        var, k, table = step
        a, vx, vy = history
        if var == "a":
            if not isinstance(regime, DynamicRule):
                law = np.zeros(self.factors.n_a)
                law[regime[k]] = 1.0
                return law
            x_now = vx[k - 1] if k >= 1 else key[self.factors.n_rx - 1]
            j = k - 1 - self.factors.y_offset
            y_prev = vy[j] if j >= 0 else key[len(key) - 1 - self.factors.y_offset + k]
            a_prev = a[k - 1] if k >= 1 else pre_actions[0]
            law = regime.law([a_prev], [x_now], [y_prev])
            if law is not None:
                return law
            table = self.factors.action_table(k)
            parents = key + pre_actions + a + vx + vy
        else:
            parents = key + a + vx + vy
        law = table.law(parents)
        if law is None:
            raise UnestimableFactorError(
                f"factor {table.name} cell {parents} has {table.count(parents)} rows < min_cell={self.min_cell}",
                factor=table.name, cell=parents)
        return law

    def _terminal(self, key, history) -> float:
        cell = key + history[0] + history[1] + history[2]
        n = self.factors.terminal.count(cell)
        if n < self.min_cell:
            raise UnestimableFactorError(f"terminal mean cell {cell} has {n} rows < min_cell={self.min_cell}",
                                         factor="terminal", cell=cell)
        return self.factors.terminal.mean(cell)

    @staticmethod
    def _extend(history, var, value):
        a, vx, vy = history
        if var == "a":
            return a + (value,), vx, vy
        if var == "x":
            return a, vx + (value,), vy
        return a, vx, vy + (value,)

    def _exact(self, key, regime, pre_actions) -> float:
        paths = [(((), (), ()), 1.0)]
        for step in self.factors.steps:
            expanded = []
            for history, p in paths:
                law = self._step_law(key, regime, pre_actions, step, history)
                for value in np.flatnonzero(law):
                    expanded.append((self._extend(history, step[0], int(value)), p * law[value]))
            paths = expanded
        return float(sum(p * self._terminal(key, history) for history, p in paths))

    def _monte_carlo(self, key, regime, pre_actions, call_id) -> tuple[float, float]:
        n = self.mc_paths
        u = stream(self.seed, GFORMULA, call_id).random((n, len(self.factors.steps)))
        values = np.empty(n)
        for m in range(n):
            history = ((), (), ())
            for s, step in enumerate(self.factors.steps):
                law = self._step_law(key, regime, pre_actions, step, history)
                value = int(sample_rows(law[None, :], u[m, s:s + 1])[0])
                history = self._extend(history, step[0], value)
            values[m] = self._terminal(key, history)
        return float(values.mean()), float(values.std(ddof=1) / math.sqrt(n))

    def control_weights(self, key, mapper: TreatmentMapper) -> dict[tuple[int, ...], float]:
        """Empirical law of the control vectors among D=0 windows of the R̄ stratum."""
        if self._controls is None:
            controls: dict[tuple, Counter] = defaultdict(Counter)
            d = mapper.indicator(self.index.z)
            for k, r_key in enumerate(self.index.keys("r")):
                if d[k] == 0:
                    controls[r_key][tuple(int(v) for v in self.index.z[k])] += 1
            self._controls = controls
        counts = self._controls.get(tuple(key))
        if not counts:
            raise NoControlMatchError(f"no D=0 window in stratum {tuple(key)}", cell=tuple(key))
        total = sum(counts.values())
        return {v: c / total for v, c in sorted(counts.items())}


def build_model(config: AnalysisConfig, index: HistoryIndex, mapper: TreatmentMapper,
                conditioning: Optional[str] = None) -> OutcomeModelBase:
    """Treatment imputation model for the configured method."""
    if config.method == "adjustment":
        arms = mapper.indicator(index.z)[:, None]
        return AdjustmentModel(index, arms, conditioning or config.resolved_conditioning(), config.min_cell)
    return GFormulaModel(index, "z", config)


def potential_outcome(model: OutcomeModelBase, mapper: TreatmentMapper, key, d: int,
                      control_convention: str = "canonical") -> tuple[float, float]:
    """Imputed E[Y(d) | key] and its Monte Carlo SE.

    Adjustment matches on D = d; the g-formula intervenes with the canonical vector
    for d, or for d = 0 under 'weighted' averages over the stratum's control vectors."""
    if isinstance(model, AdjustmentModel):
        return model.mean(key, (d,))
    if d == 1 or control_convention == "canonical":
        return model.mean(key, mapper.canonical(d))
    value, variance = 0.0, 0.0
    for vector, w in model.control_weights(key, mapper).items():
        m, se = model.mean(key, vector)
        value += w * m
        variance += (w * se) ** 2
    return value, math.sqrt(variance)


def estimate_adjusted_mean(panel: Panel, spec: WindowSpec, mapper: TreatmentMapper, conditioning: str,
                           i: int, t: int, d: int = 0, min_cell: int = MIN_CELL) -> float:
    """Mean of Y among observed (j, s) with D = d in the exact stratum of (i, t).

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        mapper (TreatmentMapper): h(.) rule.
        conditioning (str): 'r' (R̄) or 'rv' ([R̄, V̄]).
        i (int): Unit index.
        t (int): Query time.
        d (int): Arm.
        min_cell (int): Rows the stratum needs.

    Returns:
        float: Adjusted mean."""
    check_query(spec, t, panel.horizon)
    index = HistoryIndex(panel, spec)
    model = AdjustmentModel(index, mapper.indicator(index.z)[:, None], conditioning, min_cell)
    return model.mean(model.key(index.row(i, t)), (d,))[0]


def g_formula_mean(panel: Panel, spec: WindowSpec, mapper: TreatmentMapper, i: int, t: int, d: int,
                   config: Optional[AnalysisConfig] = None) -> tuple[float, float]:
    """E[Y(d) | R̄ of (i, t)] by the g-formula, with its Monte Carlo SE."""
    check_query(spec, t, panel.horizon)
    config = config or AnalysisConfig(window=spec)
    index = HistoryIndex(panel, spec)
    model = GFormulaModel(index, "z", config)
    return potential_outcome(model, mapper, model.key(index.row(i, t)), d, config.control_convention)


def dominant_reason(dropped: list[DroppedUnit]) -> str:
    counts = Counter(d.reason for d in dropped)
    return counts.most_common(1)[0][0] if counts else "empty-unit-set"


def jackknife_se(replicates: list[Optional[float]]) -> float:
    """Delete-a-group jackknife SE from per-group replicate estimates."""
    values = np.asarray([v for v in replicates if v is not None], dtype=float)
    G = len(values)
    if G < 2:
        return 0.0
    return float(math.sqrt((G - 1) / G * np.sum((values - values.mean()) ** 2)))


def unit_groups(units: Sequence[str], groups: int) -> np.ndarray:
    """Jackknife group of every unit, dealt round-robin in sorted label order."""
    G = max(1, min(groups, len(units)))
    ranks = np.empty(len(units), dtype=np.int64)
    ranks[np.argsort(np.asarray(units, dtype=str), kind="stable")] = np.arange(len(units))
    return ranks % G


def _contrasts(model, mapper, index, members, convention, runner: Runner, label: str):
    """(member, contrast, imputed, mc_se) for estimable members and drops for the rest."""

    def impute(member):
        i, t = member
        row = index.row(i, t)
        if row is None:
            return member, None, "history-underflow"
        try:
            return member, potential_outcome(model, mapper, model.key(row), 0, convention), None
        except EstimationError as e:
            return member, None, e.reason

    kept, dropped = [], []
    for (i, t), imputed, reason in runner.map(label, impute, members):
        if imputed is None:
            dropped.append((i, t, reason))
        else:
            y = float(index.y_value[index.row(i, t)])
            kept.append(((i, t), y, imputed[0], imputed[1]))
    return kept, dropped


def estimate_att(panel: Panel, spec: WindowSpec, mapper: TreatmentMapper, config: AnalysisConfig,
                 units: Optional[Iterable[tuple[int, int]]] = None, threads: Optional[int] = None) -> EstimateReport:
    """ATT over U_1^obs: mean of Y^obs minus the imputed Y(0); the sum is the
    attributable total.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Lag geometry.
        mapper (TreatmentMapper): h(.) rule.
        config (AnalysisConfig): Method, conditioning, convention and caps.
        units (Optional[Iterable]): Restrict U_1^obs to these (unit index, time) pairs.
        threads (Optional[int]): Worker count.

    Returns:
        EstimateReport: Estimate, jackknife and Monte Carlo SE, drops, contributions."""
    runner = Runner(threads)
    index = HistoryIndex(panel, spec)
    _, treated = build_unit_sets(panel, spec, mapper)
    members = treated.members
    if units is not None:
        wanted = set(tuple(u) for u in units)
        members = [m for m in members if m in wanted]
    logger.info(f"Estimating ATT by {config.method} over {len(members)} treated units.")
    model = build_model(config, index, mapper)
    convention = config.control_convention
    kept, dropped = _contrasts(model, mapper, index, members, convention, runner, "ATT imputation")
    dropped_units = [DroppedUnit(unit=panel.units[i], time=t, reason=reason) for i, t, reason in dropped]
    if dropped_units:
        logger.warning(f"{len(dropped_units)} treated units dropped, mostly '{dominant_reason(dropped_units)}'.")
    if not kept:
        reason = dominant_reason(dropped_units)
        raise AllUnitsDroppedError(f"every treated unit was dropped (dominant reason: {reason})",
                                   reason=reason, candidates=len(members))
    contributions = [Contribution(unit=panel.units[i], unit_index=i, time=t, observed=y, imputed=m,
                                  contrast=y - m) for (i, t), y, m, _ in kept]
    contrasts = [c.contrast for c in contributions]
    value = ordered_mean(contrasts)
    n = len(contrasts)
    mc_se = math.sqrt(sum((se / n) ** 2 for *_, se in kept))

    groups = unit_groups(panel.units, config.jackknife_groups or JACKKNIFE_GROUPS)
    kept_members = [m for m, *_ in kept]

    def replicate(g: int) -> Optional[float]:
        sub = index.subset(groups[index.unit] != g)
        sub_model = build_model(config, sub, mapper)
        values = []
        for i, t in kept_members:
            if groups[i] == g:
                continue
            try:
                m, _ = potential_outcome(sub_model, mapper, sub_model.key(sub.row(i, t)), 0, convention)
            except EstimationError:
                continue
            values.append(float(index.y_value[index.row(i, t)]) - m)
        return ordered_mean(values) if values else None

    G = int(groups.max()) + 1
    jack_se = jackknife_se(Runner(runner.threads).map("ATT jackknife", replicate, range(G))) if G > 1 else 0.0
    warnings = []
    if config.method == "adjustment":
        tables = fit_conditional_tables(panel, spec, config.min_cell, "z")
        if dependence_strata(tables.covariate, "a"):
            warnings.append("tdc-suspected")
            logger.warning("Fitted covariate law depends on the lagged treatment: tdc-suspected.")
    report = EstimateReport(
        estimand="ATT",
        value=value,
        se=math.sqrt(jack_se ** 2 + mc_se ** 2),
        mc_se=mc_se,
        n_treated=n,
        n_candidates=len(members),
        total=float(np.sum(contrasts)),
        mode={"method": config.method, "conditioning": model.conditioning, "control_convention": convention,
              "mapper": mapper.describe()},
        dropped=dropped_units,
        contributions=contributions,
        warnings=warnings,
    )
    logger.info(f"ATT estimation finished: {value:.6g} (se {report.se:.3g}, n={n}).")
    return report
