import io
import os
import json
import hashlib
import logging
import tempfile
import numpy as np
import pandas as pd
from pathlib import Path
from typing import Any, Optional, TypeVar
from importlib import metadata
from pydantic import BaseModel, ValidationError
from ..config import SCHEMA_VERSION, VERSION
from ..exceptions import ConfigError, PanelError, GridError
from ..models import ColumnGrid, PanelSchema, RunManifest
from ..panel import Panel

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

TRACKED_PACKAGES = ["numpy", "scipy", "pandas", "pydantic", "joblib", "typer"]


def load_json(path: Path) -> Any:
    """Parse a JSON file, reporting syntax errors as path:line:col."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: file not found", path=path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}", path=path)


def parse_model(data: Any, model: type[ModelT], source: str = "<config>") -> ModelT:
    if isinstance(data, dict) and data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {data.get('schema_version')!r}")
    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(f"{source}: {where}: {first['msg']}", errors=len(e.errors()))


def load_model(path: Path, model: type[ModelT]) -> ModelT:
    """Load and validate a versioned JSON config file."""
    return parse_model(load_json(path), model, str(path))


def canonical_json(data: Any) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def atomic_write_bytes(path: Path, data: bytes):
    """Write through a temporary file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", delete=False) as handle:
        handle.write(data)
        tmp_name = handle.name
    os.replace(tmp_name, path)


def atomic_write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_model_json(path: Path, model: BaseModel):
    atomic_write_text(path, model.model_dump_json(indent=2) + "\n")


def write_frame_csv(path: Path, frame: pd.DataFrame):
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n", float_format="%.12g")
    atomic_write_text(path, buffer.getvalue())


def _codes(series: pd.Series, grid: ColumnGrid) -> np.ndarray:
    """Map raw column values to grid codes: exact grid match first, then binning."""
    codes = np.empty(len(series), dtype=np.int64)
    edges = np.asarray(grid.bin_edges) if grid.bin_edges is not None else None
    cache: dict[Any, int] = {}
    for k, value in enumerate(series.tolist()):
        if value in cache:
            codes[k] = cache[value]
            continue
        try:
            code = grid.code_of(value)
        except (ValueError, TypeError):
            code = None
            if edges is not None and not isinstance(value, str):
                v = float(value)
                if edges[0] <= v <= edges[-1]:
                    code = min(int(np.searchsorted(edges, v, side="right")) - 1, grid.size - 1)
            if code is None:
                raise GridError(f"value {value!r} in column '{grid.name}' is off the declared grid",
                                column=grid.name, row=k + 2)
        cache[value] = codes[k] = code
    return codes


def read_panel_csv(path: Path, schema: PanelSchema) -> Panel:
    """Ingest a long-format CSV (one row per unit and time) into a Panel.

    Args:
        path (Path): CSV with header unit,time,z,s,y,<covariate names>.
        schema (PanelSchema): Declared grids, optional bin edges.

    Returns:
        Panel: Units in order of first appearance."""
    path = Path(path)
    if not path.exists():
        raise PanelError(f"{path}: file not found")
    frame = pd.read_csv(path, dtype={"unit": str}, keep_default_na=False)
    columns = ["unit", "time", schema.treatment.name, schema.exposure.name, schema.outcome.name]
    columns += [grid.name for grid in schema.covariates]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise PanelError(f"{path}: missing columns {missing}")
    duplicated = frame.duplicated(["unit", "time"])
    if duplicated.any():
        row = frame[duplicated].iloc[0]
        raise PanelError(f"{path}: duplicate row for unit {row['unit']}, time {row['time']}",
                         unit=row["unit"], time=row["time"])
    units = list(dict.fromkeys(frame["unit"].tolist()))
    horizon = int(frame["time"].max())
    for unit, times in frame.groupby("unit", sort=False)["time"]:
        expected = set(range(1, horizon + 1))
        gaps = sorted(expected - set(int(t) for t in times))
        if gaps or int(times.min()) < 1:
            raise PanelError(f"{path}: unit {unit} has a gap at time {gaps[0] if gaps else int(times.min())}",
                             unit=unit)
    frame = frame.assign(_unit=frame["unit"].map({u: k for k, u in enumerate(units)}))
    frame = frame.sort_values(["_unit", "time"], kind="stable")
    shape = (len(units), horizon)
    grid_of = lambda grid: _codes(frame[grid.name], grid).reshape(shape)
    z = grid_of(schema.treatment)
    s = grid_of(schema.exposure)
    y = grid_of(schema.outcome)
    x = np.stack([grid_of(grid) for grid in schema.covariates], axis=-1)
    logger.info(f"Panel ingested from {path}: I={len(units)}, T={horizon}.")
    return Panel(schema, units, z, s, y, x)


def panel_frame(panel: Panel) -> pd.DataFrame:
    I, T = panel.n_units, panel.horizon
    schema = panel.schema

    def value(grid, codes):
        values = np.asarray(grid.numeric_values()) if grid.is_numeric else np.asarray(grid.values, dtype=object)
        return values[codes.reshape(-1)]

    data = {
        "unit": np.repeat(panel.units, T),
        "time": np.tile(np.arange(1, T + 1), I),
        schema.treatment.name: panel.z.reshape(-1),
        schema.exposure.name: value(schema.exposure, panel.s),
        schema.outcome.name: value(schema.outcome, panel.y),
    }
    for p, grid in enumerate(schema.covariates):
        data[grid.name] = value(grid, panel.x[..., p])
    return pd.DataFrame(data)


def write_panel_csv(panel: Panel, path: Path):
    write_frame_csv(path, panel_frame(panel))


def package_versions() -> dict[str, str]:
    versions = {"gfcast": VERSION}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def build_manifest(command: str, arguments: dict, seed: Optional[int], config: Any,
                   inputs: dict[str, Path], outputs: dict[str, Path]) -> RunManifest:
    """Describe a run by content hashes only, so replays compare byte for byte."""
    return RunManifest(
        command=command,
        arguments=arguments,
        seed=seed,
        config_hash=sha256_bytes(canonical_json(config)),
        inputs={name: sha256_file(path) for name, path in sorted(inputs.items())},
        outputs={name: sha256_file(path) for name, path in sorted(outputs.items())},
        versions=package_versions(),
    )
