import json
import pytest
from typer.testing import CliRunner
from gfcast.config import CONFIGS_DIR
from gfcast.main import app

runner = CliRunner()

DEFAULT_CONFIG = str(CONFIGS_DIR / "analysis" / "default.json")


def simulate(out, dgp="tdc-on", units=20, horizon=60, seed=1):
    result = runner.invoke(app, ["simulate", "--dgp", dgp, "--units", str(units), "--horizon", str(horizon),
                                 "--seed", str(seed), "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def estimate_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("estimate")
    data = simulate(root / "data")
    out = root / "run"
    result = runner.invoke(app, ["estimate", "--panel", str(data / "panel.csv"), "--schema", str(data / "schema.json"),
                                 "--config", DEFAULT_CONFIG, "--dgp", "tdc-on", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_simulate_writes_panel(tmp_path):
    """Test the panel size and the byte-identity of repeated runs."""
    first = simulate(tmp_path / "a", units=5, horizon=100, seed=3)
    second = simulate(tmp_path / "b", units=5, horizon=100, seed=3)
    lines = (first / "panel.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 501
    assert lines[0] == "unit,time,z,s,y,x_1"
    for name in ("panel.csv", "schema.json", "manifest.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_simulate_requires_seed(tmp_path):
    """Test that a missing --seed is a usage error."""
    result = runner.invoke(app, ["simulate", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_estimate_writes_report(estimate_run):
    """Test the report, contributions, plot data and manifest of an estimate run."""
    report = json.loads((estimate_run / "report.json").read_text(encoding="utf-8"))
    assert report["estimand"] == "ATT"
    assert report["oracle"]["method"] == "enumeration"
    for name in ("contributions.csv", "plot-data.csv", "manifest.json"):
        assert (estimate_run / name).exists(), name
    manifest = json.loads((estimate_run / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "estimate"
    assert set(manifest["outputs"]) == {"report.json", "contributions.csv", "plot-data.csv"}


def test_rerun_reproduces_outputs(estimate_run, tmp_path):
    """Test that replaying a manifest reproduces every output byte for byte."""
    result = runner.invoke(app, ["rerun", str(estimate_run / "manifest.json"), "--out", str(tmp_path), "--threads", "2"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "report.json").read_bytes() == (estimate_run / "report.json").read_bytes()


def test_report_prints_table(estimate_run):
    """Test that report renders a saved run."""
    result = runner.invoke(app, ["report", str(estimate_run)])
    assert result.exit_code == 0, result.output
    assert "ATT report" in result.output


def test_overlap_refusal_exit_code(tmp_path):
    """Test that an unseen explicit stratum exits 4 and writes error.json."""
    data = simulate(tmp_path / "data", dgp="drift-shift", horizon=50, seed=3)
    out = tmp_path / "forecast"
    result = runner.invoke(app, ["forecast", "--panel", str(data / "panel.csv"), "--schema", str(data / "schema.json"),
                                 "--scenario", str(CONFIGS_DIR / "scenarios" / "explicit-off-support.json"),
                                 "--config", DEFAULT_CONFIG, "--seed", "3", "--out", str(out)])
    assert result.exit_code == 4, result.output
    error = json.loads((out / "error.json").read_text(encoding="utf-8"))
    assert error["code"] == "forecasting.overlap-refusal"


def test_bad_config_exit_code(tmp_path):
    """Test that a malformed config exits 2 with a config error."""
    data = simulate(tmp_path / "data", units=5, horizon=20)
    config = tmp_path / "bad.json"
    config.write_text('{"window": {"K": -1}}', encoding="utf-8")
    out = tmp_path / "run"
    result = runner.invoke(app, ["estimate", "--panel", str(data / "panel.csv"), "--schema", str(data / "schema.json"),
                                 "--config", str(config), "--out", str(out)])
    assert result.exit_code == 2, result.output
    assert json.loads((out / "error.json").read_text(encoding="utf-8"))["code"] == "config.invalid"
