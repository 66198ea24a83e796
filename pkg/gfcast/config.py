from os import getenv
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

SCHEMA_VERSION = 1
VERSION = "0.1.0"

ENUMERATION_CAP = int(getenv("GFC_ENUMERATION_CAP", str(10**7)))
MIN_CELL = int(getenv("GFC_MIN_CELL", "5"))
MC_PATHS = int(getenv("GFC_MC_PATHS", str(10**4)))
ORACLE_REPLICATIONS = int(getenv("GFC_ORACLE_REPLICATIONS", str(10**5)))
N_DRAWS = int(getenv("GFC_N_DRAWS", "1000"))
JACKKNIFE_GROUPS = int(getenv("GFC_JACKKNIFE_GROUPS", "20"))
LOG_LEVEL = getenv("GFC_LOG_LEVEL", "INFO")

CONFIGS_DIR = Path(__file__).parent / "configs"
BUNDLED_DGPS = [
    "null-effect",
    "tdc-on",
    "covid-toy",
    "flat-erf",
    "exposure-toy",
    "exposure-tdc",
    "drift-shift",
    "outcome-lag2",
]


def resolve_threads(threads: int | None = None) -> int:
    """Return the worker count: explicit value first, then GFC_THREADS, then 1."""
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(getenv("GFC_THREADS", "1")))
