import math
import time
import logging
import tempfile
import numpy as np
import xml.etree.ElementTree as ET
from collections import Counter
from pathlib import Path
from typing import Callable, Optional
from ..config import CONFIGS_DIR, BUNDLED_DGPS, ENUMERATION_CAP, ORACLE_REPLICATIONS
from ..exceptions import ConfigError, EstimationError, OverlapRefusal
from ..mapping import build_mapper
from ..models import (
    AnalysisConfig,
    CriterionResult,
    EstimandDescriptor,
    ExposurePolicy,
    ForecastConfig,
    FutureWindow,
    ScenarioSpec,
    WindowSpec,
)
from ..panel import Panel, HistoryIndex
from ..stats import fit_conditional_tables
from ..utils.io_utils import load_model, atomic_write_bytes, atomic_write_text
from ..utils.utils import grid_vectors
from .simulator import Dgp, load_dgp, simulate
from .oracle import (
    StructuralOracle,
    Schedule,
    UnitProfile,
    anchored_profile,
    oracle_estimand,
    oracle_exposure_response,
    transport_law_distance,
)
from .estimator import estimate_att
from .forecaster import forecast_att_f
from .exposure import build_erf_model, estimate_aee, forecast_aee_f

logger = logging.getLogger(__name__)

SE_MULTIPLE = 3.0
TOLERANCE = 1e-12
TV_BOUND = 1e-10
LINEARITY_BOUND = 1e-10
FIDELITY_RATE = 0.99

UNITS = 20
HORIZON = 500
SHORT_HORIZON = 50
SMALL_DRAWS = 200
OVERLAP_SEEDS = 20
FIDELITY_SEEDS = 5

BUNDLED_EXAMPLES = [
    "analysis/default.json",
    "analysis/tdc-k2.json",
    "analysis/naive-rv.json",
    "analysis/exposure-k1.json",
    "scenarios/fixed-time.json",
    "scenarios/match-past-r.json",
    "scenarios/explicit-off-support.json",
    "policies/point-mass.json",
    "policies/truncate.json",
    "policies/natural.json",
    "policies/dynamic.json",
    "policies/mixture.json",
]

Check = tuple[str, bool, str]


def within(estimate: float, target: float, se: float, multiple: float = SE_MULTIPLE) -> bool:
    return abs(estimate - target) <= multiple * se + TOLERANCE


def compare(label: str, estimate: float, target: float, se: float) -> Check:
    passed = within(estimate, target, se)
    return label, passed, f"{label} {estimate:.4g} vs {target:.4g} (se {se:.3g})"


def verdict(checks: list[Check]) -> tuple[bool, str]:
    failed = [message for _, passed, message in checks if not passed]
    if failed:
        return False, "failed: " + "; ".join(failed)
    return True, "; ".join(message for _, _, message in checks)


class ValidationSuite:
    """Acceptance matrix checked against the structural oracle.

    Every criterion simulates its own panels from the bundled DGPs, runs the
    estimators and compares them with exact (or Monte Carlo) ground truth. A criterion
    that raises is reported as failed with the error text.

    Attributes:
        seed (int): Base seed of every simulation, oracle and draw stream.
        threads (Optional[int]): Worker count handed to every stage.
        cap (int): Enumeration cap of the oracles.
        replications (int): Oracle Monte Carlo replications."""

    def __init__(self, seed: int = 20240601, threads: Optional[int] = None, cap: int = ENUMERATION_CAP,
                 replications: int = ORACLE_REPLICATIONS):
        self.seed = seed
        self.threads = threads
        self.cap = cap
        self.replications = replications
        self._dgps: dict[str, Dgp] = {}
        self._panels: dict[tuple, Panel] = {}

    def criteria(self) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
        return [
            ("null-effect", self.null_effect),
            ("g-formula-correctness", self.g_formula_correctness),
            ("degenerate-equivalence", self.degenerate_equivalence),
            ("transport-factorization", self.transport_factorization),
            ("transport-consistency", self.transport_consistency),
            ("violation-sensitivity", self.violation_sensitivity),
            ("overlap", self.overlap),
            ("exposure-suite", self.exposure_suite),
            ("reproducibility", self.reproducibility),
            ("table-fidelity", self.table_fidelity),
            ("oracle-cross-check", self.oracle_cross_check),
        ]

    def check_bundled(self):
        """Refuse to start when a bundled config is missing."""
        missing = [f"{name}.json" for name in BUNDLED_DGPS if not (CONFIGS_DIR / f"{name}.json").exists()]
        missing += [path for path in BUNDLED_EXAMPLES if not (CONFIGS_DIR / path).exists()]
        if missing:
            raise ConfigError(f"bundled configs missing from {CONFIGS_DIR}: {', '.join(missing)}",
                              missing=len(missing))

    def run(self, only: Optional[list[str]] = None) -> list[CriterionResult]:
        """Run the selected criteria (all by default) in order.

        Returns:
            list[CriterionResult]: One result per criterion, failures included."""
        self.check_bundled()
        known = [name for name, _ in self.criteria()]
        unknown = sorted(set(only or []) - set(known))
        if unknown:
            raise ConfigError(f"unknown criteria {unknown}", known=", ".join(known))
        results = []
        for name, criterion in self.criteria():
            if only and name not in only:
                continue
            logger.info(f"Running criterion {name}.")
            start = time.perf_counter()
            try:
                passed, message = criterion()
            except Exception as e:
                logger.error(f"Criterion {name} raised: {e}")
                passed, message = False, f"{type(e).__name__}: {e}"
            seconds = round(time.perf_counter() - start, 3)
            results.append(CriterionResult(name=name, passed=passed, message=message, seconds=seconds))
            logger.info(f"Criterion {name} {'passed' if passed else 'FAILED'} in {seconds:.1f}s.")
        return results

    # fixtures

    def dgp(self, name: str) -> Dgp:
        if name not in self._dgps:
            self._dgps[name] = load_dgp(name)
        return self._dgps[name]

    def panel(self, name: str, horizon: int = HORIZON, seed: Optional[int] = None, units: int = UNITS) -> Panel:
        key = (name, horizon, self.seed if seed is None else seed, units)
        if key not in self._panels:
            self._panels[key] = simulate(self.dgp(name), units, horizon, key[2])
        return self._panels[key]

    def oracle(self, name: str, **kwargs) -> StructuralOracle:
        options = {"cap": self.cap, "replications": self.replications, "seed": self.seed, "threads": self.threads}
        options.update(kwargs)
        return StructuralOracle(self.dgp(name), **options)

    @staticmethod
    def analysis(name: str, **update) -> AnalysisConfig:
        return load_model(CONFIGS_DIR / "analysis" / f"{name}.json", AnalysisConfig).model_copy(update=update)

    @staticmethod
    def scenario(name: str, **update) -> ForecastConfig:
        return load_model(CONFIGS_DIR / "scenarios" / f"{name}.json", ForecastConfig).model_copy(update=update)

    @staticmethod
    def policy(name: str) -> ExposurePolicy:
        return load_model(CONFIGS_DIR / "policies" / f"{name}.json", ExposurePolicy)

    # criteria

    def null_effect(self) -> tuple[bool, str]:
        """ATT, ATT_F, AEE and AEE_F are zero when the outcome ignores the action."""
        panel = self.panel("null-effect")
        config = self.analysis("default")
        spec = config.window
        mapper = build_mapper(config.mapper, spec)
        forecast = self.scenario("fixed-time", n_draws=SMALL_DRAWS)
        policy = ExposurePolicy(kind="point-mass", threshold=0.0)
        reports = [
            estimate_att(panel, spec, mapper, config, threads=self.threads),
            forecast_att_f(panel, spec, mapper, config, forecast, threads=self.threads),
            estimate_aee(panel, spec, policy, config, threads=self.threads),
            forecast_aee_f(panel, spec, config, forecast, policy, threads=self.threads),
        ]
        return verdict([compare(r.estimand, r.value, 0.0, r.se) for r in reports])

    def g_formula_correctness(self) -> tuple[bool, str]:
        """g-formula ATT matches the oracle under time-dependent confounding while the
        [R̄, V̄] adjustment does not."""
        dgp = self.dgp("tdc-on")
        panel = self.panel("tdc-on")
        oracle = self.oracle("tdc-on")
        checks = []
        for name in ("tdc-k2", "naive-rv"):
            config = self.analysis(name)
            spec = config.window
            mapper = build_mapper(config.mapper, spec)
            report = estimate_att(panel, spec, mapper, config, threads=self.threads)
            truth = oracle_estimand(dgp, EstimandDescriptor(kind="ATT", members=report.members()),
                                    panel, spec, mapper, oracle)
            se = math.hypot(report.se, truth.mc_standard_error)
            label, passed, message = compare(f"ATT[{config.method}/{report.mode['conditioning']}]",
                                             report.value, truth.value, se)
            if config.method == "adjustment":
                passed = not passed
                message += ", expected a miss beyond 3 se"
            checks.append((label, passed, message))
        return verdict(checks)

    def degenerate_equivalence(self) -> tuple[bool, str]:
        """With K = 0 the g-formula and the R̄ adjustment agree bit for bit."""
        checks = []
        for name in ("tdc-on", "covid-toy"):
            panel = self.panel(name)
            config = self.analysis("default")
            spec = config.window
            mapper = build_mapper(config.mapper, spec)
            g = estimate_att(panel, spec, mapper, config.model_copy(update={"method": "g-formula"}),
                             threads=self.threads)
            adjusted = estimate_att(panel, spec, mapper,
                                    config.model_copy(update={"method": "adjustment", "conditioning": "r"}),
                                    threads=self.threads)
            same = (g.value == adjusted.value and g.se == adjusted.se
                    and [c.imputed for c in g.contributions] == [c.imputed for c in adjusted.contributions])
            checks.append((name, same, f"{name}: g-formula {g.value!r} vs adjustment {adjusted.value!r}"))
        return verdict(checks)

    def transport_factorization(self) -> tuple[bool, str]:
        """Y(d) given R̄ has the same law in a past treated and a future population."""
        dgp = self.dgp("tdc-on")
        spec = WindowSpec(B=0, K=1)
        oracle = self.oracle("tdc-on", monte_carlo=False)
        start = UnitProfile(time=8, x_prev=1, a_prev=1, y_prev=1)
        distances = [transport_law_distance(dgp, spec, "outcome", 4, start, 12, vector, oracle=oracle)
                     for vector in ((0, 0), (0, 1), (1, 1))]
        distance = max(distances)
        return distance <= TV_BOUND, f"max TV {distance:.3g} (bound {TV_BOUND:g})"

    def transport_consistency(self) -> tuple[bool, str]:
        """ATT_F matches the oracle at F = 5 and a back-test reproduces the in-sample ATT."""
        dgp = self.dgp("tdc-on")
        panel = self.panel("tdc-on")
        config = self.analysis("default", method="adjustment")
        spec = config.window
        mapper = build_mapper(config.mapper, spec)
        forecast = self.scenario("fixed-time")
        report = forecast_att_f(panel, spec, mapper, config, forecast, threads=self.threads)
        members = sorted({(c.unit_index, c.time) for c in report.contributions})
        truth = oracle_estimand(dgp, EstimandDescriptor(kind="ATT_F", members=members, future=forecast.future,
                                                        form="conditional"),
                                panel, spec, mapper, self.oracle("tdc-on"))
        checks = [compare("ATT_F", report.value, truth.value, math.hypot(report.se, truth.mc_standard_error))]

        T = panel.horizon
        backtest = ForecastConfig(future=FutureWindow(F=5, T_Z=8, T_F=8, origin=T - 13),
                                  scenario=ScenarioSpec(rule="observed-treated"), n_draws=1,
                                  method="adjustment", seed=forecast.seed)
        replay = forecast_att_f(panel, spec, mapper, config, backtest, threads=self.threads)
        in_sample = estimate_att(panel, spec, mapper, config, units=replay.members(), threads=self.threads)
        checks.append(compare("back-test ATT_F", replay.value, in_sample.value, math.hypot(replay.se, in_sample.se)))
        return verdict(checks)

    def violation_sensitivity(self) -> tuple[bool, str]:
        """A modifier shifting right after the panel makes ATT_F miss the oracle."""
        dgp = self.dgp("drift-shift")
        panel = self.panel("drift-shift", horizon=SHORT_HORIZON)
        config = self.analysis("default", method="adjustment")
        spec = config.window
        mapper = build_mapper(config.mapper, spec)
        forecast = self.scenario("fixed-time", n_draws=SMALL_DRAWS)
        report = forecast_att_f(panel, spec, mapper, config, forecast, threads=self.threads)
        members = sorted({(c.unit_index, c.time) for c in report.contributions})
        truth = oracle_estimand(dgp, EstimandDescriptor(kind="ATT_F", members=members, future=forecast.future,
                                                        form="conditional"),
                                panel, spec, mapper, self.oracle("drift-shift"))
        se = math.hypot(report.se, truth.mc_standard_error)
        detected = not within(report.value, truth.value, se)
        return detected, f"ATT_F {report.value:.4g} vs shifted oracle {truth.value:.4g} (se {se:.3g})"

    def overlap(self) -> tuple[bool, str]:
        """Off-support scenarios are refused and supported ones never are."""
        config = self.analysis("default", method="adjustment")
        spec = config.window
        mapper = build_mapper(config.mapper, spec)
        panel = self.panel("drift-shift", horizon=SHORT_HORIZON)
        try:
            forecast_att_f(panel, spec, mapper, config, self.scenario("explicit-off-support"), threads=self.threads)
            refused = False
        except OverlapRefusal:
            refused = True
        false_refusals, empty = 0, 0
        for k in range(OVERLAP_SEEDS):
            supported = self.panel("tdc-on", horizon=SHORT_HORIZON, seed=self.seed + 1 + k)
            scenario = self.scenario("match-past-r", n_draws=50, seed=k)
            try:
                forecast_att_f(supported, spec, mapper, config, scenario, threads=self.threads)
            except OverlapRefusal:
                false_refusals += 1
            except EstimationError:
                empty += 1
        passed = refused and false_refusals == 0
        return passed, (f"off-support refused={refused}; {false_refusals}/{OVERLAP_SEEDS} false refusals"
                        f" ({empty} empty selections)")

    def exposure_suite(self) -> tuple[bool, str]:
        """Flat ERF, zero effect of the natural course, oracle agreement of static
        policies, exposure transport laws and mixture linearity."""
        config = self.analysis("default")
        spec = config.window
        checks = self._flat_erf(config)

        dgp = self.dgp("exposure-toy")
        panel = self.panel("exposure-toy")
        oracle = self.oracle("exposure-toy")
        forecast = self.scenario("fixed-time", n_draws=SMALL_DRAWS)
        natural = self.policy("natural")
        for report in (estimate_aee(panel, spec, natural, config, threads=self.threads),
                       forecast_aee_f(panel, spec, config, forecast, natural, threads=self.threads)):
            checks.append(compare(f"{report.estimand}[natural]", report.value, 0.0, report.se))
        for name in ("point-mass", "truncate"):
            policy = self.policy(name)
            report = estimate_aee(panel, spec, policy, config, threads=self.threads)
            truth = oracle_estimand(dgp, EstimandDescriptor(kind="AEE", members=report.members(), policy=policy),
                                    panel, spec, oracle=oracle)
            checks.append(compare(f"AEE[{name}]", report.value, truth.value,
                                  math.hypot(report.se, truth.mc_standard_error)))
        policy = self.policy("point-mass")
        report = forecast_aee_f(panel, spec, config, forecast, policy, threads=self.threads)
        members = sorted({(c.unit_index, c.time) for c in report.contributions})
        truth = oracle_estimand(dgp, EstimandDescriptor(kind="AEE_F", members=members, policy=policy,
                                                        future=forecast.future), panel, spec, oracle=oracle)
        checks.append(compare("AEE_F[point-mass]", report.value, truth.value,
                              math.hypot(report.se, truth.mc_standard_error)))

        tdc = self.dgp("exposure-tdc")
        window = WindowSpec(B=0, K=1)
        law_oracle = self.oracle("exposure-tdc", monte_carlo=False)
        start = UnitProfile(time=8, x_prev=0, a_prev=2, y_prev=1)
        outcome_tv = max(transport_law_distance(tdc, window, "outcome", 4, start, 12, vector, oracle=law_oracle)
                         for vector in ((0, 0), (2, 1)))
        exposure_tv = transport_law_distance(tdc, window, "exposure-law", 4, start, 12, oracle=law_oracle)
        checks.append(("ERF transport", outcome_tv <= TV_BOUND, f"ERF transport TV {outcome_tv:.3g}"))
        checks.append(("exposure-law transport", exposure_tv <= TV_BOUND, f"exposure-law transport TV {exposure_tv:.3g}"))

        mixture = self.policy("mixture")
        mixed = estimate_aee(panel, spec, mixture, config, threads=self.threads)
        parts = [estimate_aee(panel, spec, component, config, threads=self.threads) for component in mixture.components]
        combined = sum(w * part.value for w, part in zip(mixture.weights, parts))
        gap = abs(mixed.value - combined)
        checks.append(("mixture linearity", gap <= LINEARITY_BOUND, f"mixture linearity gap {gap:.3g}"))
        return verdict(checks)

    def _flat_erf(self, config: AnalysisConfig) -> list[Check]:
        """Stratum-averaged ERF of every exposure vector against the flat truth. Strata
        without rows for a vector are left out and the weights renormalised."""
        dgp = self.dgp("flat-erf")
        panel = self.panel("flat-erf")
        spec = config.window
        index = HistoryIndex(panel, spec)
        model = build_erf_model(index, config, "r")
        oracle = self.oracle("flat-erf")
        keys = index.keys("r")
        counts = Counter(keys)
        anchors = {}
        for k, key in enumerate(keys):
            if key not in anchors:
                anchors[key] = anchored_profile(panel, dgp, spec, int(index.unit[k]), int(index.time[k])), int(index.time[k])
        checks = []
        for vector in grid_vectors(panel.schema.exposure.size, spec.K + 1):
            cells = [(key, n) for key, n in sorted(counts.items())
                     if model.strata.count(key, vector) >= config.min_cell]
            mass = sum(n for _, n in cells)
            if not mass:
                checks.append((f"flat ERF{vector}", False, f"flat ERF{vector} has no estimable stratum"))
                continue
            estimate, target, variance = 0.0, 0.0, 0.0
            for key, n in cells:
                w = n / mass
                profile, t = anchors[key]
                estimate += w * model.mean(key, vector)[0]
                target += w * oracle_exposure_response(dgp, spec, profile, t, vector, oracle).value
                variance += w ** 2 * model.variance_of_mean(key, vector)
            checks.append(compare(f"flat ERF{vector}", estimate, target, math.sqrt(variance)))
        return checks

    def reproducibility(self) -> tuple[bool, str]:
        """Commands repeated with 1 and 4 threads and replayed from their manifests
        write byte-identical files."""
        from ..main import run_simulate, run_estimate, run_forecast, run_rerun

        analysis = CONFIGS_DIR / "analysis" / "default.json"
        scenario = CONFIGS_DIR / "scenarios" / "match-past-r.json"
        commands = ("simulate", "estimate", "forecast")
        mismatches = []
        with tempfile.TemporaryDirectory(prefix="gfcast-validate-") as tmp:
            root = Path(tmp)
            panel, schema = root / "threads-1" / "simulate" / "panel.csv", root / "threads-1" / "simulate" / "schema.json"
            runs: dict[int, dict[str, bytes]] = {}
            for threads in (1, 4):
                out = root / f"threads-{threads}"
                run_simulate(dgp="tdc-on", units=UNITS, horizon=SHORT_HORIZON, seed=self.seed,
                             out=out / "simulate")
                run_estimate(panel=panel, schema=schema, config=analysis, seed=self.seed,
                             out=out / "estimate", threads=threads)
                run_forecast(panel=panel, schema=schema, config=analysis, scenario=scenario,
                             seed=self.seed, out=out / "forecast", threads=threads)
                runs[threads] = {f"{command}/{path.name}": path.read_bytes()
                                 for command in commands for path in sorted((out / command).iterdir())}
            for name, data in runs[1].items():
                if runs[4].get(name) != data:
                    mismatches.append(f"{name} differs between 1 and 4 threads")
            for command in commands:
                manifest = root / "threads-4" / command / "manifest.json"
                run_rerun(manifest=manifest, out=root / "rerun" / command, threads=2)
                for path in sorted((root / "rerun" / command).iterdir()):
                    if (manifest.parent / path.name).read_bytes() != path.read_bytes():
                        mismatches.append(f"{command}/{path.name} differs after replay")
        if mismatches:
            return False, "; ".join(mismatches)
        return True, f"{len(runs[1])} files identical across thread counts and replays"

    def table_fidelity(self) -> tuple[bool, str]:
        """Fitted one-step tables recover the structural tables cell by cell."""
        dgp = self.dgp("tdc-on")
        spec = WindowSpec()
        covariate, action, outcome = dgp.tables(1)
        passed, total = 0, 0
        for k in range(FIDELITY_SEEDS):
            panel = self.panel("tdc-on", seed=self.seed + 100 + k)
            tables = fit_conditional_tables(panel, spec, 1, "z")
            # parent keys follow the structural table axes
            for table, truth in ((tables.covariate, covariate), (tables.outcome, outcome), (tables.action, action)):
                for key, row in table.counts.items():
                    n = row.sum()
                    for p_hat, p in zip(row / n, truth[key]):
                        total += 1
                        passed += abs(p_hat - p) <= SE_MULTIPLE * math.sqrt(p * (1 - p) / n) + TOLERANCE
        rate = passed / total if total else 0.0
        logger.info(f"Table fidelity: {passed}/{total} cells within 3 binomial SE.")
        return rate >= FIDELITY_RATE, f"{passed}/{total} cells within 3 binomial SE ({rate:.2%})"

    def oracle_cross_check(self) -> tuple[bool, str]:
        """Exact enumeration agrees with forced Monte Carlo on the same quantity."""
        dgp = self.dgp("tdc-on")
        spec = WindowSpec(B=0, K=2)
        start = UnitProfile(time=5, x=1, x_prev=0, a_prev=1, y_prev=0)
        schedule = Schedule(forced={5: 0, 6: 1, 7: 1}, x_forced=start.x_forced())
        end = 5 + spec.K
        exact = self.oracle("tdc-on", monte_carlo=False).expectation(5, start.start_states(), schedule, end)
        sampled = self.oracle("tdc-on", cap=0).expectation(5, start.start_states(), schedule, end)
        law = self.oracle("tdc-on", monte_carlo=False).enumerate(5, start.start_states(), schedule, end)
        mass = float(np.sum(list(law.values())))
        checks = [compare("enumeration vs Monte Carlo", sampled.value, exact.value, sampled.mc_standard_error),
                  ("law mass", abs(mass - 1.0) <= 1e-12, f"enumerated mass {mass!r}"),
                  ("methods", exact.method == "enumeration" and sampled.method == "monte-carlo",
                   f"methods {exact.method}/{sampled.method}")]
        return verdict(checks)


def write_junit(results: list[CriterionResult], path: Path):
    """JUnit-style XML with one testcase per criterion."""
    failures = sum(not r.passed for r in results)
    suite = ET.Element("testsuite", name="gfcast-acceptance", tests=str(len(results)), failures=str(failures),
                       errors="0", time=f"{sum(r.seconds for r in results):.3f}")
    for result in results:
        case = ET.SubElement(suite, "testcase", classname="gfcast.validate", name=result.name,
                             time=f"{result.seconds:.3f}")
        if not result.passed:
            failure = ET.SubElement(case, "failure", message=result.message[:200])
            failure.text = result.message
        else:
            ET.SubElement(case, "system-out").text = result.message
    ET.indent(suite)
    atomic_write_bytes(path, ET.tostring(suite, encoding="utf-8", xml_declaration=True) + b"\n")


def summary_text(results: list[CriterionResult]) -> str:
    lines = []
    for result in results:
        lines.append(f"[{'PASS' if result.passed else 'FAIL'}] {result.name}: {result.message}")
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} criteria passed")
    return "\n".join(lines) + "\n"


def write_summary(results: list[CriterionResult], path: Path):
    atomic_write_text(path, summary_text(results))
