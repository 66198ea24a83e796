import logging
import pandas as pd
from enum import Enum
from pathlib import Path
from collections import Counter
from typing import Annotated, Callable, Optional
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from .config import LOG_LEVEL, ENUMERATION_CAP
from .exceptions import GfcastError, ConfigError, ValidationFailure
from .mapping import build_mapper
from .models import (
    AnalysisConfig,
    EstimandDescriptor,
    EstimateReport,
    ExposurePolicy,
    ForecastConfig,
    PanelSchema,
    RunManifest,
)
from .panel import Panel
from .services.simulator import load_dgp, simulate
from .services.oracle import StructuralOracle, oracle_estimand
from .services.estimator import estimate_att
from .services.forecaster import forecast_att_f
from .services.exposure import estimate_aee, forecast_aee_f
from .services.validation import ValidationSuite, write_junit, write_summary, summary_text
from .utils.io_utils import (
    load_model,
    read_panel_csv,
    write_panel_csv,
    write_model_json,
    write_frame_csv,
    atomic_write_text,
    canonical_json,
    build_manifest,
    sha256_file,
)

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="gfcast",
    help="Treatment effects, forecasts and exposure effects on discrete panels, checked against a structural oracle.",
    no_args_is_help=True,
    add_completion=False,
)
console = Console()


class Mode(str, Enum):
    adjustment = "adjustment"
    gformula = "gformula"


class Convention(str, Enum):
    canonical = "canonical"
    weighted = "weighted"


METHODS = {"adjustment": "adjustment", "gformula": "g-formula"}

# output file names
PANEL = "panel.csv"
SCHEMA = "schema.json"
REPORT = "report.json"
CONTRIBUTIONS = "contributions.csv"
PLOT_DATA = "plot-data.csv"
MANIFEST = "manifest.json"
ERROR = "error.json"
JUNIT = "junit.xml"
SUMMARY = "summary.txt"


def load_panel(panel: Path, schema: Path) -> Panel:
    return read_panel_csv(panel, load_model(schema, PanelSchema))


def load_analysis(config: Optional[Path], seed: Optional[int] = None, mode: Optional[str] = None,
                  control_convention: Optional[str] = None) -> AnalysisConfig:
    """Analysis config from file (defaults otherwise) with the command-line overrides applied."""
    analysis = load_model(config, AnalysisConfig) if config is not None else AnalysisConfig()
    update = {}
    if seed is not None:
        update["seed"] = seed
    if mode is not None:
        update["method"] = METHODS[mode]
    if control_convention is not None:
        update["control_convention"] = control_convention
    return analysis.model_copy(update=update)


def _dgp_inputs(dgp: Optional[str]) -> dict[str, Path]:
    """Hash DGP files; bundled DGPs are covered by the config hash."""
    return {"dgp": Path(dgp)} if dgp is not None and Path(dgp).suffix else {}


def _oracle(dgp, analysis: AnalysisConfig, threads: Optional[int]) -> StructuralOracle:
    return StructuralOracle(dgp, cap=analysis.enumeration_cap, seed=analysis.seed or 0, threads=threads)


def _arguments(**arguments) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in arguments.items()}


def plot_frame(report: EstimateReport) -> pd.DataFrame:
    """Per-time series of the weighted mean contrast next to the oracle value."""
    frame = pd.DataFrame([c.model_dump() for c in report.contributions])
    oracle = report.oracle.value if report.oracle is not None else float("nan")
    if frame.empty:
        return pd.DataFrame(columns=["time", "n", "estimate", "oracle"])
    frame["weighted"] = frame["contrast"] * frame["weight"]
    grouped = frame.groupby("time", sort=True)
    plot = pd.DataFrame({
        "n": grouped.size(),
        "estimate": grouped["weighted"].sum() / grouped["weight"].sum(),
    }).reset_index()
    plot["oracle"] = oracle
    return plot


def write_report(out: Path, report: EstimateReport) -> dict[str, Path]:
    out = Path(out)
    contributions = pd.DataFrame([c.model_dump() for c in report.contributions],
                                 columns=["unit", "unit_index", "time", "observed", "imputed", "contrast", "weight"])
    write_model_json(out / REPORT, report)
    write_frame_csv(out / CONTRIBUTIONS, contributions)
    write_frame_csv(out / PLOT_DATA, plot_frame(report))
    return {REPORT: out / REPORT, CONTRIBUTIONS: out / CONTRIBUTIONS, PLOT_DATA: out / PLOT_DATA}


def finish(command: str, out: Path, arguments: dict, seed: Optional[int], config, inputs: dict[str, Path],
           outputs: dict[str, Path]) -> dict[str, Path]:
    """Write the manifest of a finished run and return every output path."""
    manifest = build_manifest(command, arguments, seed, config, inputs, outputs)
    write_model_json(Path(out) / MANIFEST, manifest)
    logger.info(f"{command} finished, outputs in {out}.")
    return {**outputs, MANIFEST: Path(out) / MANIFEST}


def run_simulate(dgp: str, units: int, horizon: int, seed: int, out: Path) -> dict[str, Path]:
    """Simulate a panel from a bundled DGP name or a DGP config file."""
    model = load_dgp(dgp)
    panel = simulate(model, units, horizon, seed)
    out = Path(out)
    write_panel_csv(panel, out / PANEL)
    write_model_json(out / SCHEMA, panel.schema)
    arguments = _arguments(dgp=dgp, units=units, horizon=horizon, seed=seed)
    return finish("simulate", out, arguments, seed, model.config.model_dump(mode="json"), _dgp_inputs(dgp),
                  {PANEL: out / PANEL, SCHEMA: out / SCHEMA})


def run_estimate(panel: Path, schema: Path, out: Path, config: Optional[Path] = None, seed: Optional[int] = None,
                 mode: Optional[str] = None, control_convention: Optional[str] = None, dgp: Optional[str] = None,
                 threads: Optional[int] = None) -> dict[str, Path]:
    """ATT on the observed treated units, with the oracle value when a DGP is given."""
    data = load_panel(panel, schema)
    analysis = load_analysis(config, seed, mode, control_convention)
    spec = analysis.window
    mapper = build_mapper(analysis.mapper, spec)
    report = estimate_att(data, spec, mapper, analysis, threads=threads)
    if dgp is not None:
        model = load_dgp(dgp)
        descriptor = EstimandDescriptor(kind="ATT", members=report.members(),
                                        control_convention=analysis.control_convention)
        report.oracle = oracle_estimand(model, descriptor, data, spec, mapper, _oracle(model, analysis, threads))
    arguments = _arguments(panel=panel, schema=schema, config=config, seed=seed, mode=mode,
                           control_convention=control_convention, dgp=dgp)
    inputs = {"panel": panel, "schema": schema, **({"config": config} if config else {}), **_dgp_inputs(dgp)}
    return finish("estimate", out, arguments, seed, analysis.model_dump(mode="json"), inputs, write_report(out, report))


def run_forecast(panel: Path, schema: Path, scenario: Path, seed: int, out: Path, config: Optional[Path] = None,
                 policy: Optional[Path] = None, mode: Optional[str] = None, control_convention: Optional[str] = None,
                 force: bool = False, dgp: Optional[str] = None, threads: Optional[int] = None) -> dict[str, Path]:
    """ATT_F on a future window, or AEE_F when a policy is given."""
    data = load_panel(panel, schema)
    analysis = load_analysis(config, seed, None, control_convention)
    forecast = load_model(scenario, ForecastConfig).model_copy(update={"seed": seed})
    if mode is not None:
        forecast = forecast.model_copy(update={"method": METHODS[mode]})
    spec = analysis.window
    if policy is not None:
        exposure_policy = load_model(policy, ExposurePolicy)
        report = forecast_aee_f(data, spec, analysis, forecast, exposure_policy, force, threads)
        mapper = None
        descriptor = dict(kind="AEE_F", policy=exposure_policy)
    else:
        mapper = build_mapper(analysis.mapper, spec)
        report = forecast_att_f(data, spec, mapper, analysis, forecast, force, threads)
        descriptor = dict(kind="ATT_F", control_convention=analysis.control_convention)
    if dgp is not None:
        model = load_dgp(dgp)
        members = sorted({(c.unit_index, c.time) for c in report.contributions})
        report.oracle = oracle_estimand(model, EstimandDescriptor(members=members, future=forecast.future, **descriptor),
                                        data, spec, mapper, _oracle(model, analysis, threads))
    arguments = _arguments(panel=panel, schema=schema, scenario=scenario, seed=seed, config=config, policy=policy,
                           mode=mode, control_convention=control_convention, force=force, dgp=dgp)
    inputs = {"panel": panel, "schema": schema, "scenario": scenario, **({"config": config} if config else {}),
              **({"policy": policy} if policy else {}), **_dgp_inputs(dgp)}
    config_data = {"analysis": analysis.model_dump(mode="json"), "forecast": forecast.model_dump(mode="json")}
    return finish("forecast", out, arguments, seed, config_data, inputs, write_report(out, report))


def run_expose(panel: Path, schema: Path, policy: Path, out: Path, config: Optional[Path] = None,
               seed: Optional[int] = None, dgp: Optional[str] = None, threads: Optional[int] = None) -> dict[str, Path]:
    """AEE of a static exposure policy on the observed windows."""
    data = load_panel(panel, schema)
    analysis = load_analysis(config, seed)
    exposure_policy = load_model(policy, ExposurePolicy)
    spec = analysis.window
    report = estimate_aee(data, spec, exposure_policy, analysis, threads)
    if dgp is not None:
        model = load_dgp(dgp)
        descriptor = EstimandDescriptor(kind="AEE", members=report.members(), policy=exposure_policy)
        report.oracle = oracle_estimand(model, descriptor, data, spec, oracle=_oracle(model, analysis, threads))
    arguments = _arguments(panel=panel, schema=schema, policy=policy, config=config, seed=seed, dgp=dgp)
    inputs = {"panel": panel, "schema": schema, "policy": policy, **({"config": config} if config else {}),
              **_dgp_inputs(dgp)}
    config_data = {"analysis": analysis.model_dump(mode="json"), "policy": exposure_policy.model_dump(mode="json")}
    return finish("expose", out, arguments, seed, config_data, inputs, write_report(out, report))


def run_validate(seed: int, out: Path, only: Optional[list[str]] = None, cap: Optional[int] = None,
                 threads: Optional[int] = None) -> dict[str, Path]:
    """Run the acceptance suite; any failed criterion raises ValidationFailure after the
    XML and summary are written."""
    suite = ValidationSuite(seed, threads, cap=ENUMERATION_CAP if cap is None else cap)
    results = suite.run(only)
    out = Path(out)
    write_junit(results, out / JUNIT)
    write_summary(results, out / SUMMARY)
    console.print(summary_text(results), end="", markup=False, highlight=False)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ValidationFailure(f"{len(failed)} criteria failed: {', '.join(failed)}", failed=len(failed))
    return {JUNIT: out / JUNIT, SUMMARY: out / SUMMARY}


def run_report(path: Path) -> EstimateReport:
    """Print a report.json (or the one inside a run directory) as a table."""
    path = Path(path)
    if path.is_dir():
        path = path / REPORT
    report = load_model(path, EstimateReport)
    table = Table(title=f"{report.estimand} report")
    table.add_column("field")
    table.add_column("value")
    table.add_row("estimate", f"{report.value:.6g}")
    table.add_row("standard error", f"{report.se:.4g} (monte carlo {report.mc_se:.3g})")
    table.add_row("retained / candidates", f"{report.n_treated} / {report.n_candidates}")
    table.add_row("total", f"{report.total:.6g}")
    if report.oracle is not None:
        table.add_row("oracle", f"{report.oracle.value:.6g} ({report.oracle.method})")
    for key, value in sorted(report.mode.items()):
        table.add_row(key, value)
    if report.dropped:
        reasons = Counter(d.reason for d in report.dropped)
        table.add_row("dropped", ", ".join(f"{r}: {n}" for r, n in sorted(reasons.items())))
    if report.overlap is not None:
        table.add_row("overlap violations", f"{report.overlap.n_violations}/{report.overlap.n_checked}")
    if report.warnings:
        table.add_row("warnings", ", ".join(report.warnings))
    console.print(table)
    return report


COMMANDS: dict[str, Callable[..., dict[str, Path]]] = {
    "simulate": run_simulate,
    "estimate": run_estimate,
    "forecast": run_forecast,
    "expose": run_expose,
}


def run_rerun(manifest: Path, out: Path, threads: Optional[int] = None) -> dict[str, Path]:
    """Replay a manifest and check that inputs and outputs hash as recorded."""
    recorded = load_model(manifest, RunManifest)
    if recorded.command not in COMMANDS:
        raise ConfigError(f"command '{recorded.command}' cannot be replayed", command=recorded.command)
    arguments = dict(recorded.arguments)
    for name, digest in recorded.inputs.items():
        path = Path(str(arguments[name]))
        if not path.exists() or sha256_file(path) != digest:
            raise ValidationFailure(f"input '{name}' at {path} no longer matches the manifest", input=name)
    if recorded.command != "simulate":
        arguments["threads"] = threads
    outputs = COMMANDS[recorded.command](out=Path(out), **arguments)
    changed = [name for name, digest in recorded.outputs.items() if sha256_file(Path(out) / name) != digest]
    if changed:
        raise ValidationFailure(f"replay of {recorded.command} changed {', '.join(changed)}", changed=len(changed))
    logger.info(f"Replay of {recorded.command} reproduced {len(recorded.outputs)} outputs.")
    return outputs


def guarded(out: Optional[Path], fn: Callable, /, **kwargs):
    """Run a command, turning a GfcastError into error.json and its exit code."""
    try:
        return fn(**kwargs)
    except GfcastError as e:
        logger.error(f"{e.code}: {e.message}")
        if out is not None:
            atomic_write_text(Path(out) / ERROR, canonical_json(e.to_dict()).decode("utf-8") + "\n")
        raise typer.Exit(e.exit_code)


PanelOpt = Annotated[Path, typer.Option("--panel", help="Long-format panel CSV.")]
SchemaOpt = Annotated[Path, typer.Option("--schema", help="Panel schema JSON.")]
OutOpt = Annotated[Path, typer.Option("--out", help="Output directory.")]
ConfigOpt = Annotated[Optional[Path], typer.Option("--config", help="Analysis config JSON.")]
DgpOpt = Annotated[Optional[str], typer.Option("--dgp", help="Bundled DGP name or DGP config for the oracle value.")]
ThreadsOpt = Annotated[Optional[int], typer.Option("--threads", min=1, help="Workers (falls back to GFC_THREADS).")]
ModeOpt = Annotated[Optional[Mode], typer.Option("--mode", help="Estimation method.")]
ConventionOpt = Annotated[Optional[Convention], typer.Option("--control-convention", help="Y(0) convention.")]


def _value(option: Optional[Enum]) -> Optional[str]:
    return option.value if option is not None else None


@app.callback()
def main(verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging.")] = False):
    """Set up logging once for every command."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else LOG_LEVEL,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.command("simulate")
def simulate_command(
        seed: Annotated[int, typer.Option("--seed", help="Simulation seed.")],
        out: OutOpt,
        dgp: Annotated[str, typer.Option("--dgp", help="Bundled DGP name or DGP config.")] = "null-effect",
        units: Annotated[int, typer.Option("--units", min=1, help="Number of units I.")] = 20,
        horizon: Annotated[int, typer.Option("--horizon", min=1, help="Number of periods T.")] = 60):
    """Simulate a panel from a structural DGP."""
    guarded(out, run_simulate, dgp=dgp, units=units, horizon=horizon, seed=seed, out=out)


@app.command("estimate")
def estimate_command(panel: PanelOpt, schema: SchemaOpt, out: OutOpt, config: ConfigOpt = None,
                     seed: Annotated[Optional[int], typer.Option("--seed")] = None, mode: ModeOpt = None,
                     control_convention: ConventionOpt = None, dgp: DgpOpt = None, threads: ThreadsOpt = None):
    """Estimate the ATT on the observed treated units."""
    guarded(out, run_estimate, panel=panel, schema=schema, out=out, config=config, seed=seed, mode=_value(mode),
            control_convention=_value(control_convention), dgp=dgp, threads=threads)


@app.command("forecast")
def forecast_command(panel: PanelOpt, schema: SchemaOpt,
                     scenario: Annotated[Path, typer.Option("--scenario", help="Forecast config JSON.")],
                     seed: Annotated[int, typer.Option("--seed", help="Imputation seed.")],
                     out: OutOpt, config: ConfigOpt = None,
                     policy: Annotated[Optional[Path], typer.Option("--policy", help="Exposure policy: forecast AEE_F.")] = None,
                     mode: ModeOpt = None, control_convention: ConventionOpt = None,
                     force: Annotated[bool, typer.Option("--force", help="Proceed past an overlap refusal.")] = False,
                     dgp: DgpOpt = None, threads: ThreadsOpt = None):
    """Forecast ATT_F (or AEE_F with --policy) on a future window."""
    guarded(out, run_forecast, panel=panel, schema=schema, scenario=scenario, seed=seed, out=out, config=config,
            policy=policy, mode=_value(mode), control_convention=_value(control_convention), force=force, dgp=dgp,
            threads=threads)


@app.command("expose")
def expose_command(panel: PanelOpt, schema: SchemaOpt,
                   policy: Annotated[Path, typer.Option("--policy", help="Exposure policy JSON.")],
                   out: OutOpt, config: ConfigOpt = None,
                   seed: Annotated[Optional[int], typer.Option("--seed")] = None,
                   dgp: DgpOpt = None, threads: ThreadsOpt = None):
    """Estimate the AEE of an exposure policy on the observed windows."""
    guarded(out, run_expose, panel=panel, schema=schema, policy=policy, out=out, config=config, seed=seed, dgp=dgp,
            threads=threads)


@app.command("validate")
def validate_command(seed: Annotated[int, typer.Option("--seed", help="Base seed of the suite.")], out: OutOpt,
                     only: Annotated[Optional[list[str]], typer.Option("--only", help="Criterion to run (repeatable).")] = None,
                     cap: Annotated[Optional[int], typer.Option("--cap", min=0, help="Oracle enumeration cap.")] = None,
                     threads: ThreadsOpt = None):
    """Run the acceptance suite against the structural oracle."""
    guarded(out, run_validate, seed=seed, out=out, only=only or None, cap=cap, threads=threads)


@app.command("report")
def report_command(path: Annotated[Path, typer.Argument(help="report.json or a run directory.")]):
    """Show a report as a table."""
    guarded(None, run_report, path=path)


@app.command("rerun")
def rerun_command(manifest: Annotated[Path, typer.Argument(help="manifest.json of an earlier run.")], out: OutOpt,
                  threads: ThreadsOpt = None):
    """Replay a run from its manifest and check the outputs are byte-identical."""
    guarded(out, run_rerun, manifest=manifest, out=out, threads=threads)
