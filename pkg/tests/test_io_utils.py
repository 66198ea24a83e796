import json
import pytest
from gfcast.exceptions import ConfigError, GridError, PanelError
from gfcast.models import AnalysisConfig, ColumnGrid, PanelSchema
from gfcast.utils.io_utils import (
    build_manifest,
    load_model,
    read_panel_csv,
    sha256_file,
    write_model_json,
    write_panel_csv,
)


def write_csv(path, rows):
    path.write_text("unit,time,z,s,y,x\n" + "".join(f"{row}\n" for row in rows), encoding="utf-8")
    return path


def test_panel_csv_round_trip(tmp_path, tdc_panel):
    """Test that a written panel reads back equal."""
    path = tmp_path / "panel.csv"
    write_panel_csv(tdc_panel, path)
    assert read_panel_csv(path, tdc_panel.schema) == tdc_panel
    assert path.read_text(encoding="utf-8").splitlines()[0] == "unit,time,z,s,y,x_1"


def test_time_gap_is_rejected(tmp_path, toy_schema):
    """Test that a missing time for one unit raises PanelError."""
    path = write_csv(tmp_path / "gap.csv", ["a,1,0,0,0,0", "a,2,0,0,1,0", "b,1,0,0,0,0"])
    with pytest.raises(PanelError, match="gap"):
        read_panel_csv(path, toy_schema)


def test_off_grid_value_is_rejected(tmp_path, toy_schema):
    """Test that a value off the declared grid raises GridError."""
    path = write_csv(tmp_path / "grid.csv", ["a,1,0,0,3,0"])
    with pytest.raises(GridError):
        read_panel_csv(path, toy_schema)


def test_bin_edges_map_raw_values(tmp_path):
    """Test that declared bin edges map raw values onto grid codes."""
    schema = PanelSchema(outcome=ColumnGrid(name="y", values=[2.5, 7.5], bin_edges=[0.0, 5.0, 10.0]),
                         covariates=[ColumnGrid(name="x", values=[0, 1])])
    path = write_csv(tmp_path / "binned.csv", ["a,1,0,0,2.5,0", "a,2,0,0,7,1", "a,3,0,0,10,0"])
    panel = read_panel_csv(path, schema)
    assert panel.y.tolist() == [[0, 1, 1]]


def test_config_errors_carry_location(tmp_path):
    """Test JSON syntax errors and unsupported schema versions."""
    broken = tmp_path / "broken.json"
    broken.write_text('{\n  "method": "adjustment",\n  "min_cell": }\n', encoding="utf-8")
    with pytest.raises(ConfigError, match=r"broken\.json:3:\d+"):
        load_model(broken, AnalysisConfig)
    versioned = tmp_path / "versioned.json"
    versioned.write_text(json.dumps({"schema_version": 2}), encoding="utf-8")
    with pytest.raises(ConfigError, match="schema_version"):
        load_model(versioned, AnalysisConfig)
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"method": "matching"}), encoding="utf-8")
    with pytest.raises(ConfigError, match="method"):
        load_model(invalid, AnalysisConfig)


def test_manifest_hashes_files(tmp_path):
    """Test that the manifest records content hashes and no temporary files remain."""
    config = AnalysisConfig(min_cell=1)
    report = tmp_path / "out" / "config.json"
    write_model_json(report, config)
    manifest = build_manifest("estimate", {"seed": 1}, 1, config.model_dump(mode="json"),
                              inputs={}, outputs={"config.json": report})
    assert manifest.outputs == {"config.json": sha256_file(report)}
    assert manifest.versions["gfcast"]
    assert sorted(p.name for p in report.parent.iterdir()) == ["config.json"]
    again = build_manifest("estimate", {"seed": 1}, 1, config.model_dump(mode="json"), {}, {"config.json": report})
    assert again.config_hash == manifest.config_hash
