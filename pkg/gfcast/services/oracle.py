import math
import logging
import numpy as np
from collections import defaultdict
from typing import Literal, Optional, Union
from pydantic import BaseModel, ConfigDict
from ..config import ENUMERATION_CAP, ORACLE_REPLICATIONS
from ..exceptions import OracleError, DgpError
from ..models import EstimandDescriptor, OracleResult, WindowSpec
from ..panel import Panel
from ..utils.utils import ORACLE, stream, sample_rows, key_id
from .simulator import Dgp
from .runner import Runner
from .policies import DynamicRule, vector_law

logger = logging.getLogger(__name__)

BLOCK = 10_000
MASS_FLOOR = 1e-14


class UnitProfile(BaseModel):
    """Structural state an oracle computation starts from: the post-step state at
    time-1 and, when known, the covariate state at `time`. Lagged codes are single
    values or tuples newest first; the oracle pads them to the model's depth."""
    model_config = ConfigDict(frozen=True)

    time: int
    x: Optional[int] = None
    x_prev: Union[int, tuple[int, ...]]
    a_prev: Union[int, tuple[int, ...]]
    y_prev: Union[int, tuple[int, ...]]

    def start_states(self) -> dict[tuple, float]:
        return {(self.x_prev, self.a_prev, self.y_prev): 1.0}

    def x_forced(self) -> dict[int, int]:
        return {} if self.x is None else {self.time: self.x}


class Schedule:
    """Interventions applied while rolling the structural model forward.

    Rows are computed for one history (tuples) or a batch ((n, depth) arrays).

    Attributes:
        forced (dict[int, int]): Action code forced at a time.
        x_forced (dict[int, int]): Covariate state fixed at a time (conditioning).
        rule (Optional[DynamicRule]): Stochastic policy used on rule_times."""

    def __init__(self, forced: Optional[dict[int, int]] = None, x_forced: Optional[dict[int, int]] = None,
                 rule: Optional[DynamicRule] = None, rule_times=()):
        self.forced = dict(forced or {})
        self.x_forced = dict(x_forced or {})
        self.rule = rule
        self.rule_times = frozenset(rule_times)

    def key(self) -> tuple:
        return (tuple(sorted(self.forced.items())), tuple(sorted(self.x_forced.items())),
                self.rule.key() if self.rule else None, tuple(sorted(self.rule_times)))

    @staticmethod
    def _point_mass(hist, size: int, code: int) -> np.ndarray:
        rows = np.zeros((size,) if isinstance(hist, tuple) else (len(hist), size))
        rows[..., code] = 1.0
        return rows

    def covariate_rows(self, t: int, xh, ah, yh, dgp: Dgp, table: np.ndarray) -> np.ndarray:
        if t in self.x_forced:
            return self._point_mass(xh, dgp.n_x, self.x_forced[t])
        return dgp.covariate_rows(table, xh, ah, yh)

    def action_rows(self, t: int, xh, yh, ah, dgp: Dgp, table: np.ndarray) -> np.ndarray:
        if t in self.forced:
            return self._point_mass(xh, dgp.n_a, self.forced[t])
        natural = dgp.action_rows(table, xh, yh, ah)
        if self.rule is not None and t in self.rule_times:
            if isinstance(xh, tuple):
                law = self.rule.law(ah, xh, yh)
                return natural if law is None else law
            return self.rule.rows(xh, yh, ah, natural)
        return natural


class StructuralOracle:
    """Ground truth from a Dgp: exact forward enumeration of the joint law of the
    (x, a, y) histories plus recorded variables, or Monte Carlo when the path count
    exceeds the cap.

    Attributes:
        dgp (Dgp): Structural model.
        cap (int): Largest path count enumerated exactly.
        replications (int): Monte Carlo replications.
        seed (int): Monte Carlo seed.
        monte_carlo (bool): Whether to fall back to Monte Carlo above the cap."""

    def __init__(self, dgp: Dgp, cap: int = ENUMERATION_CAP, replications: int = ORACLE_REPLICATIONS,
                 seed: int = 0, monte_carlo: bool = True, threads: Optional[int] = None):
        self.dgp = dgp
        self.cap = cap
        self.replications = replications
        self.seed = seed
        self.monte_carlo = monte_carlo
        self.runner = Runner(threads)
        self._cache: dict[tuple, OracleResult] = {}
        self._law_cache: dict[tuple, dict] = {}

    def histories(self, start_states: dict) -> dict[tuple, float]:
        """Start states with every lag padded to the model's history depth."""
        dgp = self.dgp
        states: dict[tuple, float] = defaultdict(float)
        for (x, a, y), p in start_states.items():
            states[(dgp.history(x, dgp.depth_x), dgp.history(a, dgp.depth_a), dgp.history(y, dgp.depth_y))] += p
        return dict(states)

    def path_count(self, start_time: int, start_states: dict, schedule: Schedule, end: int) -> int:
        count = sum(1 for p in start_states.values() if p > 0)
        for t in range(start_time, end + 1):
            count *= (1 if t in schedule.x_forced else self.dgp.n_x)
            count *= (1 if t in schedule.forced else self.dgp.n_a)
            count *= self.dgp.n_y
        return count

    def enumerate(self, start_time: int, start_states: dict, schedule: Schedule, end: int,
                  record: tuple = ()) -> dict[tuple, float]:
        """Exact law of the histories at `end` and the recorded values.

        Args:
            start_time (int): First time rolled forward.
            start_states (dict): Law of the post-step state (x, a, y) at start_time-1,
                codes or newest-first lag tuples; x = -1 marks the state before time 1.
            schedule (Schedule): Interventions.
            end (int): Last time rolled forward.
            record (tuple): (variable, time) pairs to keep, variable in x/a/y.

        Returns:
            dict: {(x history, a history, y history, recorded tuple): probability}."""
        paths = self.path_count(start_time, start_states, schedule, end)
        if paths > self.cap:
            raise OracleError(f"{paths} paths exceed the enumeration cap {self.cap}", paths=paths, cap=self.cap)
        start_states = self.histories(start_states)
        cache_key = (start_time, tuple(sorted(start_states.items())), schedule.key(), end, tuple(record))
        if cache_key in self._law_cache:
            return self._law_cache[cache_key]
        positions = {item: j for j, item in enumerate(record)}
        for var, time in record:
            if time < start_time - 1:
                raise OracleError(f"cannot record {var} at time {time} before the start state at {start_time - 1}")
        states: dict[tuple, float] = defaultdict(float)
        for (xh, ah, yh), p in start_states.items():
            rec = [-1] * len(record)
            for var, hist in (("x", xh), ("a", ah), ("y", yh)):
                j = positions.get((var, start_time - 1))
                if j is not None:
                    rec[j] = hist[0]
            states[(xh, ah, yh, tuple(rec))] += p
        dgp = self.dgp
        for t in range(start_time, end + 1):
            covariate, action, outcome = dgp.tables(t)
            jx, ja, jy = positions.get(("x", t)), positions.get(("a", t)), positions.get(("y", t))
            following: dict[tuple, float] = defaultdict(float)
            for (xp, ap, yp, rec), p in states.items():
                if p == 0.0:
                    continue
                x_law = schedule.covariate_rows(t, xp, ap, yp, dgp, covariate)
                for x in np.flatnonzero(x_law):
                    xh = dgp.push(xp, x)
                    a_law = schedule.action_rows(t, xh, yp, ap, dgp, action)
                    for a in np.flatnonzero(a_law):
                        ah = dgp.push(ap, a)
                        y_law = dgp.outcome_rows(outcome, xh, ah, yp)
                        for y in np.flatnonzero(y_law):
                            r = list(rec)
                            if jx is not None:
                                r[jx] = int(x)
                            if ja is not None:
                                r[ja] = int(a)
                            if jy is not None:
                                r[jy] = int(y)
                            following[(xh, ah, dgp.push(yp, y), tuple(r))] += p * x_law[x] * a_law[a] * y_law[y]
            states = following
        law = dict(states)
        self._law_cache[cache_key] = law
        return law

    def expectation(self, start_time: int, start_states: dict, schedule: Schedule, end: int,
                    estimand: str = "E[Y]") -> OracleResult:
        """E[y_end] under the schedule, exact when enumerable."""
        start_states = self.histories(start_states)
        cache_key = (start_time, tuple(sorted(start_states.items())), schedule.key(), end)
        if cache_key in self._cache:
            return self._cache[cache_key]
        if self.path_count(start_time, start_states, schedule, end) <= self.cap:
            law = self.enumerate(start_time, start_states, schedule, end)
            value = float(sum(p * self.dgp.y_values[state[2][0]] for state, p in law.items()))
            result = OracleResult(estimand=estimand, value=value, method="enumeration")
        elif self.monte_carlo:
            mean, se = self._monte_carlo(start_time, start_states, schedule, end, key_id(cache_key))
            result = OracleResult(estimand=estimand, value=mean, mc_standard_error=se, method="monte-carlo",
                                  replications=self.replications, seed=self.seed)
        else:
            raise OracleError(f"path count exceeds the cap {self.cap} and Monte Carlo is disabled", cap=self.cap)
        self._cache[cache_key] = result
        return result

    def _monte_carlo(self, start_time, start_states, schedule, end, call_id) -> tuple[float, float]:
        dgp = self.dgp
        states = [s for s, p in start_states.items() if p > 0]
        probs = np.asarray([start_states[s] for s in states], dtype=float)
        probs = probs / probs.sum()
        x_start, a_start, y_start = (np.asarray([s[k] for s in states], dtype=np.int64) for k in range(3))
        n = self.replications
        n_blocks = math.ceil(n / BLOCK)

        def block(b: int):
            size = min(BLOCK, n - b * BLOCK)
            u = stream(self.seed, ORACLE, call_id, b).random((end - start_time + 2, 3, size))
            pick = sample_rows(np.tile(probs, (size, 1)), u[0, 0])
            xh, ah, yh = x_start[pick], a_start[pick], y_start[pick]
            for k, t in enumerate(range(start_time, end + 1), start=1):
                covariate, action, outcome = dgp.tables(t)
                x = sample_rows(schedule.covariate_rows(t, xh, ah, yh, dgp, covariate), u[k, 0])
                xh = dgp.push(xh, x)
                a = sample_rows(schedule.action_rows(t, xh, yh, ah, dgp, action), u[k, 1])
                ah = dgp.push(ah, a)
                y = sample_rows(dgp.outcome_rows(outcome, xh, ah, yh), u[k, 2])
                yh = dgp.push(yh, y)
            values = dgp.y_values[yh[:, 0]]
            return float(values.sum()), float((values ** 2).sum())

        sums = self.runner.map("oracle monte carlo", block, range(n_blocks))
        total = sum(s for s, _ in sums)
        squares = sum(q for _, q in sums)
        mean = total / n
        variance = max(squares / n - mean ** 2, 0.0) * n / (n - 1)
        return mean, math.sqrt(variance / n)


def _observed_lags(panel: Panel, dgp: Dgp, i: int, last: int) -> tuple[tuple[int, ...], ...]:
    """Newest-first x, a and y lags ending at `last`; x lags before time 1 repeat x_1."""
    if last < max(dgp.depth_a, dgp.depth_y):
        raise OracleError(f"the state at time {last} needs {max(dgp.depth_a, dgp.depth_y)} observed periods")
    a = panel.action(dgp.action_variable)
    x_lags = tuple(int(panel.x_joint[i, last - 1 - k]) for k in range(min(dgp.depth_x, last)))
    a_lags = tuple(int(a[i, last - 1 - k]) for k in range(dgp.depth_a))
    y_lags = tuple(int(panel.y[i, last - 1 - k]) for k in range(dgp.depth_y))
    return dgp.history(x_lags, dgp.depth_x), a_lags, y_lags


def anchored_profile(panel: Panel, dgp: Dgp, spec: WindowSpec, i: int, t: int) -> UnitProfile:
    """State at H = t-B-K read from the panel: x_H plus the lags ending at H-1."""
    H = spec.anchor(t)
    if H < 2 or H > panel.horizon:
        raise OracleError(f"anchor H={H} of t={t} needs 2 <= H <= T={panel.horizon}")
    x_prev, a_prev, y_prev = _observed_lags(panel, dgp, i, H - 1)
    return UnitProfile(time=H, x=int(panel.x_joint[i, H - 1]), x_prev=x_prev, a_prev=a_prev, y_prev=y_prev)


def origin_profile(panel: Panel, dgp: Dgp, i: int, origin: int) -> UnitProfile:
    """Post-step state at the forecast origin; the next covariate state is free."""
    x_prev, a_prev, y_prev = _observed_lags(panel, dgp, i, origin)
    return UnitProfile(time=origin + 1, x=None, x_prev=x_prev, a_prev=a_prev, y_prev=y_prev)


def _window_forced(spec: WindowSpec, t: int, vector) -> dict[int, int]:
    return {tau: int(v) for tau, v in zip(spec.window_times(t), vector)}


def _gap_forced(dgp: Dgp, profile: UnitProfile, H: int, gap: Optional[dict[int, int]]) -> dict[int, int]:
    """Treatment before the window: supplied schedule, else zero for treatment models."""
    if gap is not None:
        return {tau: v for tau, v in gap.items() if profile.time <= tau < H}
    if dgp.kind == "treatment":
        return {tau: 0 for tau in range(profile.time, H)}
    return {}


def natural_window_law(oracle: StructuralOracle, spec: WindowSpec, profile: UnitProfile, t: int,
                       gap: Optional[dict[int, int]] = None) -> dict[tuple[int, ...], float]:
    """Law of the action window under the natural course from the profile."""
    H = spec.anchor(t)
    schedule = Schedule(forced=_gap_forced(oracle.dgp, profile, H, gap), x_forced=profile.x_forced())
    record = tuple(("a", tau) for tau in spec.window_times(t))
    law = oracle.enumerate(profile.time, profile.start_states(), schedule, t - spec.B, record)
    vectors: dict[tuple[int, ...], float] = defaultdict(float)
    for state, p in law.items():
        vectors[state[3]] += p
    return dict(vectors)


def oracle_potential_outcome(dgp: Dgp, mapper, spec: WindowSpec, profile: UnitProfile, t: int, d: int,
                             control_convention: Literal["canonical", "weighted"] = "canonical",
                             gap: Optional[dict[int, int]] = None,
                             oracle: Optional[StructuralOracle] = None) -> OracleResult:
    """E[Y_t(d) | profile] with the window forced to the canonical pattern for d.

    Args:
        dgp (Dgp): Treatment model.
        mapper (TreatmentMapper): Supplies canonical and control vectors.
        spec (WindowSpec): Lag geometry.
        profile (UnitProfile): Start state, at or before H.
        t (int): Outcome time.
        d (int): 0 or 1.
        control_convention (str): 'weighted' averages E[Y(z̄)] over the control vectors with
            their natural-course probabilities given the profile.
        gap (Optional[dict[int, int]]): Treatment before the window (default zero).

    Returns:
        OracleResult: Exact value or Monte Carlo mean."""
    oracle = oracle or StructuralOracle(dgp)
    H = spec.anchor(t)
    if profile.time > H:
        raise OracleError(f"profile at {profile.time} starts after the window anchor H={H}")
    gap_forced = _gap_forced(dgp, profile, H, gap)
    estimand = f"E[Y_{t}({d})]"

    def mean_for(vector) -> OracleResult:
        schedule = Schedule(forced={**gap_forced, **_window_forced(spec, t, vector)}, x_forced=profile.x_forced())
        return oracle.expectation(profile.time, profile.start_states(), schedule, t, estimand)

    if d == 1 or control_convention == "canonical":
        return mean_for(mapper.canonical(d))
    law = natural_window_law(oracle, spec, profile, t, gap)
    controls = {v: law.get(v, 0.0) for v in mapper.control_vectors()}
    mass = sum(controls.values())
    if mass <= 0:
        raise OracleError("no natural-course mass on the control vectors")
    parts = [(p / mass, mean_for(v)) for v, p in controls.items() if p > 0]
    return _combine(estimand, parts)


def oracle_exposure_response(dgp: Dgp, spec: WindowSpec, profile: UnitProfile, t: int, s_vector,
                             oracle: Optional[StructuralOracle] = None) -> OracleResult:
    """E[Y_t(s̄) | profile] with the exposure window forced to s_vector (grid codes)."""
    oracle = oracle or StructuralOracle(dgp)
    if len(s_vector) != spec.K + 1:
        raise OracleError(f"exposure vector has length {len(s_vector)}, window has {spec.K + 1}")
    schedule = Schedule(forced=_window_forced(spec, t, s_vector), x_forced=profile.x_forced())
    return oracle.expectation(profile.time, profile.start_states(), schedule, t, f"ERF_{t}{tuple(s_vector)}")


def _combine(estimand: str, parts: list[tuple[float, OracleResult]]) -> OracleResult:
    value = float(sum(w * r.value for w, r in parts))
    monte_carlo = [r for _, r in parts if r.method == "monte-carlo"]
    if not monte_carlo:
        return OracleResult(estimand=estimand, value=value, method="enumeration")
    se = math.sqrt(sum((w * r.mc_standard_error) ** 2 for w, r in parts))
    return OracleResult(estimand=estimand, value=value, mc_standard_error=se, method="monte-carlo",
                        replications=monte_carlo[0].replications, seed=monte_carlo[0].seed)


def policy_mean(oracle: StructuralOracle, spec: WindowSpec, policy, profile: UnitProfile, t: int,
                gap: Optional[dict[int, int]] = None) -> OracleResult:
    """Σ_s̄ p*(s̄) E[Y_t(s̄) | profile], or the mean under a dynamic policy.

    State-dependent laws (natural, truncate-below) are evaluated on the state at the
    window anchor, which is enumerated first when the profile starts earlier."""
    dgp = oracle.dgp
    H = spec.anchor(t)
    gap_forced = _gap_forced(dgp, profile, H, gap)
    grid = dgp.config.action
    estimand = f"E[Y_{t}(p*)]"
    match policy.kind:
        case "mixture":
            return _combine(estimand, [(w, policy_mean(oracle, spec, c, profile, t, gap))
                                       for w, c in zip(policy.weights, policy.components)])
        case "natural":
            schedule = Schedule(forced=gap_forced, x_forced=profile.x_forced())
            return oracle.expectation(profile.time, profile.start_states(), schedule, t, estimand)
        case "dynamic-conditional":
            rule = DynamicRule(policy, dgp.n_a)
            depths = {"s": dgp.depth_a, "x": dgp.depth_x, "y": dgp.depth_y}
            if any(rule.depths[var] > depths[var] for var in depths):
                raise OracleError(f"dynamic policy lags {rule.depths} exceed the model history {depths}")
            schedule = Schedule(forced=gap_forced, x_forced=profile.x_forced(), rule=rule,
                                rule_times=spec.window_times(t))
            return oracle.expectation(profile.time, profile.start_states(), schedule, t, estimand)
        case "truncate-below" if not (profile.time == H and profile.x is not None):
            return _over_anchor_states(oracle, spec, policy, profile, t, gap_forced, estimand)
    natural = lambda: natural_window_law(oracle, spec, profile, t, gap)
    law = vector_law(policy, grid, spec.K + 1, natural)
    parts = []
    for vector, p in law.items():
        schedule = Schedule(forced={**gap_forced, **_window_forced(spec, t, vector)}, x_forced=profile.x_forced())
        parts.append((p, oracle.expectation(profile.time, profile.start_states(), schedule, t, estimand)))
    return _combine(estimand, parts)


def _over_anchor_states(oracle, spec, policy, profile, t, gap_forced, estimand) -> OracleResult:
    dgp = oracle.dgp
    H = spec.anchor(t)
    schedule = Schedule(forced=gap_forced, x_forced=profile.x_forced())
    law = oracle.enumerate(profile.time, profile.start_states(), schedule, H - 1)
    covariate, _, _ = dgp.tables(H)
    parts = []
    for (xh, ah, yh, _), p in law.items():
        row = dgp.covariate_rows(covariate, xh, ah, yh)
        for x_H in np.flatnonzero(row):
            anchored = UnitProfile(time=H, x=int(x_H), x_prev=xh, a_prev=ah, y_prev=yh)
            parts.append((p * row[x_H], policy_mean(oracle, spec, policy, anchored, t)))
    return _combine(estimand, parts)


def future_profile(panel: Panel, dgp: Dgp, spec: WindowSpec, i: int, t: int) -> UnitProfile:
    """Panel-anchored state when the window starts inside the data, else the last
    observed state."""
    if spec.anchor(t) <= panel.horizon:
        return anchored_profile(panel, dgp, spec, i, t)
    return origin_profile(panel, dgp, i, panel.horizon)


def _future_gap(geometry, profile: UnitProfile, H: int) -> dict[int, int]:
    return {tau: geometry.gap_action(tau) for tau in range(profile.time, H)}


def oracle_estimand(dgp: Dgp, descriptor: EstimandDescriptor, panel: Panel, spec: WindowSpec,
                    mapper=None, oracle: Optional[StructuralOracle] = None) -> OracleResult:
    """Ground-truth ATT, ATT_F, AEE or AEE_F on the descriptor's unit set.

    ATT and AEE are evaluated at the panel-anchored state of each member. 'observed'
    form uses Y^obs for the first term, 'conditional' the natural or treated mean.
    ATT_F and AEE_F start from each unit's state at the forecast origin; with strata,
    ATT_F is the ratio of summed contrasts and summed stratum probabilities."""
    oracle = oracle or StructuralOracle(dgp)
    kind = descriptor.kind
    if kind in ("ATT", "ATT_F") and (dgp.kind != "treatment" or mapper is None):
        raise DgpError(f"{kind} needs a treatment DGP and a mapper")
    if kind in ("AEE", "AEE_F") and (dgp.kind != "exposure" or descriptor.policy is None):
        raise DgpError(f"{kind} needs an exposure DGP and a policy")
    if kind.endswith("_F") and descriptor.future is None:
        raise DgpError(f"{kind} needs a future window")
    if not descriptor.members:
        raise DgpError(f"{kind} descriptor has no members")
    logger.info(f"Computing oracle {kind} over {len(descriptor.members)} members.")
    parts: list[tuple[float, OracleResult]] = []
    constant = 0.0
    n = len(descriptor.members)
    if kind == "ATT":
        for i, t in descriptor.members:
            profile = anchored_profile(panel, dgp, spec, i, t)
            y0 = oracle_potential_outcome(dgp, mapper, spec, profile, t, 0, descriptor.control_convention,
                                          oracle=oracle)
            parts.append((-1.0 / n, y0))
            if descriptor.form == "observed":
                constant += panel.y_values[i, t - 1] / n
            else:
                parts.append((1.0 / n, oracle_potential_outcome(dgp, mapper, spec, profile, t, 1, oracle=oracle)))
    elif kind == "AEE":
        for i, t in descriptor.members:
            profile = anchored_profile(panel, dgp, spec, i, t)
            parts.append((-1.0 / n, policy_mean(oracle, spec, descriptor.policy, profile, t)))
            if descriptor.form == "observed":
                constant += panel.y_values[i, t - 1] / n
            else:
                natural = descriptor.policy.model_copy(update={"kind": "natural"})
                parts.append((1.0 / n, policy_mean(oracle, spec, natural, profile, t)))
    elif kind == "ATT_F":
        return _att_f(oracle, descriptor, panel, spec, mapper)
    else:
        from .forecaster import FutureGeometry
        geometry = FutureGeometry(descriptor.future, spec, panel.horizon)
        natural_policy = descriptor.policy.model_copy(update={"kind": "natural"})
        for i, t in descriptor.members:
            profile = future_profile(panel, dgp, spec, i, t)
            if descriptor.policy.kind == "natural":
                continue
            parts.append((1.0 / n, policy_mean(oracle, spec, natural_policy, profile, t)))
            parts.append((-1.0 / n, policy_mean(oracle, spec, descriptor.policy, profile, t)))
    result = _combine(kind, parts)
    value = result.value + constant
    logger.info(f"Oracle {kind} finished: {value:.6g} ({result.method}).")
    return result.model_copy(update={"value": value, "estimand": kind})


def _att_f(oracle: StructuralOracle, descriptor: EstimandDescriptor, panel: Panel, spec: WindowSpec,
           mapper) -> OracleResult:
    from .forecaster import FutureGeometry
    dgp = oracle.dgp
    geometry = FutureGeometry(descriptor.future, spec, panel.horizon)
    n = len(descriptor.members)
    if descriptor.strata is None:
        parts = []
        for i, t in descriptor.members:
            profile = future_profile(panel, dgp, spec, i, t)
            gap = _future_gap(geometry, profile, spec.anchor(t))
            for d, sign in ((1, 1.0), (0, -1.0)):
                parts.append((sign / n, oracle_potential_outcome(dgp, mapper, spec, profile, t, d,
                                                                 descriptor.control_convention, gap, oracle)))
        result = _combine("ATT_F", parts)
        logger.info(f"Oracle ATT_F finished: {result.value:.6g} ({result.method}).")
        return result
    strata = {tuple(s) for s in descriptor.strata}
    contrast_mass, stratum_mass = 0.0, 0.0
    for i, t in descriptor.members:
        profile = future_profile(panel, dgp, spec, i, t)
        H = spec.anchor(t)
        gap = _future_gap(geometry, profile, H)
        record = tuple([("x", tau) for tau in spec.r_covariate_times(t)]
                       + [("y", tau) for tau in spec.r_outcome_times(t)])
        for d, sign in ((1, 1.0), (0, -1.0)):
            schedule = Schedule(forced={**gap, **_window_forced(spec, t, mapper.canonical(d))},
                                x_forced=profile.x_forced())
            law = oracle.enumerate(profile.time, profile.start_states(), schedule, t, record)
            for (_, _, yh, rec), p in law.items():
                if rec in strata:
                    contrast_mass += sign * p * dgp.y_values[yh[0]]
                    if d == 1:
                        stratum_mass += p
    if stratum_mass <= 0:
        raise OracleError("the selected strata have zero probability")
    return OracleResult(estimand="ATT_F", value=contrast_mass / stratum_mass, method="enumeration")


def r_record(spec: WindowSpec, t: int, exposure_lags: int = 0) -> tuple:
    """(variable, time) pairs of R̄ in key order, plus pre-window action lags."""
    H = spec.anchor(t)
    return tuple([("x", tau) for tau in spec.r_covariate_times(t)]
                 + [("y", tau) for tau in spec.r_outcome_times(t)]
                 + [("a", H - k) for k in range(1, exposure_lags + 1)])


def _conditional_laws(law: dict, positions: slice) -> dict[tuple, dict]:
    """Group a joint law {(x, a, y histories, rec): p} into {given: {target: p(target | given)}}."""
    joint: dict[tuple, dict] = defaultdict(lambda: defaultdict(float))
    for (_, _, yh, rec), p in law.items():
        given, target = rec[positions], rec[positions.stop:] or (yh[0],)
        joint[given][target] += p
    result = {}
    for given, targets in joint.items():
        mass = sum(targets.values())
        if mass > MASS_FLOOR:
            result[given] = {k: v / mass for k, v in targets.items()}
    return result


def transport_law_distance(dgp: Dgp, spec: WindowSpec, target: Literal["outcome", "exposure-law"],
                           past_time: int, future_start: UnitProfile, future_time: int,
                           vector=None, gap: Optional[dict[int, int]] = None,
                           oracle: Optional[StructuralOracle] = None) -> float:
    """Largest TV distance between past and future conditional laws on shared strata.

    'outcome' compares the law of Y(vector) given R̄ (treatment or exposure vector
    forced on the window); 'exposure-law' compares the natural window exposure law given
    R̄ and the pre-window exposure lags. The past population starts from the initial laws
    at time 1; the future one from `future_start` with the gap rule applied.

    Returns:
        float: max over strata observed in both populations of TV(past, future)."""
    from ..stats import tv_distance
    oracle = oracle or StructuralOracle(dgp)
    lags = spec.L_ss if target == "exposure-law" else 0
    past_start = {(-1, a, y): float(dgp.init_a[a] * dgp.init_y[y])
                  for a in range(dgp.n_a) for y in range(dgp.n_y) if dgp.init_a[a] * dgp.init_y[y] > 0}

    def conditional(start_time, start_states, t, gap_forced):
        record = r_record(spec, t, lags)
        given = slice(0, len(record))
        forced = dict(gap_forced)
        end = t
        if target == "exposure-law":
            record = record + tuple(("a", tau) for tau in spec.window_times(t))
            end = t - spec.B
        else:
            forced.update(_window_forced(spec, t, vector))
        law = oracle.enumerate(start_time, start_states, Schedule(forced=forced), end, record)
        return _conditional_laws(law, given)

    past = conditional(1, past_start, past_time, {})
    H = spec.anchor(future_time)
    future = conditional(future_start.time, future_start.start_states(), future_time,
                         _gap_forced(dgp, future_start, H, gap))
    shared = set(past) & set(future)
    if not shared:
        raise OracleError("past and future populations share no stratum")
    return max(tv_distance(past[k], future[k]) for k in shared)
