import os
from pathlib import Path
from typing import Optional, Union

try:
    from dotenv import load_dotenv
except ImportError:  # pragma: no cover - optional dependency
    load_dotenv = None  # type: ignore


CODE_ROOT_ENV = "ILNET_ROOT"                 # Root of this code repo (preferred)
OUTPUT_DIR_ENV = "ILNET_OUTPUT_DIR"          # Default --out root for commands
WEIGHTS_ENV = "ILNET_WEIGHTS"                # Default weight file for --weights
ALLOW_PNG_ENV = "ILNET_ALLOW_PNG"            # Feature switch for PNG frame ingestion
LOG_LEVEL_ENV = "ILNET_LOG_LEVEL"


def _env_path(var: str) -> Optional[Path]:
    val = os.environ.get(var)
    if val:
        p = Path(os.path.expanduser(os.path.expandvars(val))).resolve()
        return p
    return None


def _env_flag(var: str) -> bool:
    return os.environ.get(var, "").strip().lower() in {"1", "true", "yes", "on"}


def _detect_project_root_from_here(start: Optional[Path] = None) -> Path:
    here = (start or Path(__file__).resolve()).parent
    for d in [here, *here.parents]:
        try:
            names = {p.name for p in d.iterdir()}
        except Exception:
            continue
        if (".git" in names) or ({"requirements.txt", "main.py"}.issubset(names)):
            return d
    # Fallback to current working directory if nothing else
    return Path.cwd().resolve()


def get_code_root() -> Path:
    """Return the code/project root directory.

    Priority:
    1) Environment variable ILNET_ROOT
    2) Heuristic search upwards from this file for repo markers
    3) Current working directory
    """
    return _env_path(CODE_ROOT_ENV) or _detect_project_root_from_here()


def resolve_project_path(path_like: Union[str, Path, None]) -> Optional[Path]:
    """Resolve a path relative to the project root if not absolute.

    - Expands environment variables and ~
    - If absolute, returns as-is
    - If relative, returns `get_code_root() / relative`
    - Returns None if input is None/empty
    """
    if not path_like:
        return None
    s = str(path_like)
    s = os.path.expanduser(os.path.expandvars(s))
    p = Path(s)
    if p.is_absolute():
        return p
    return get_code_root() / p


def png_enabled() -> bool:
    return _env_flag(ALLOW_PNG_ENV)


def default_log_level() -> str:
    return os.environ.get(LOG_LEVEL_ENV, "INFO")


CODE_ROOT: Path
OUTPUT_DIR: Path
DEFAULT_WEIGHTS: Optional[Path]


def refresh_roots():
    """(Re)compute root directories after environment changes.

    Call this after loading .env so ILNET_OUTPUT_DIR / ILNET_WEIGHTS are respected.
    """
    global CODE_ROOT, OUTPUT_DIR, DEFAULT_WEIGHTS
    CODE_ROOT = get_code_root()
    OUTPUT_DIR = _env_path(OUTPUT_DIR_ENV) or (CODE_ROOT / "runs")
    DEFAULT_WEIGHTS = _env_path(WEIGHTS_ENV)


if load_dotenv is not None:
    try:
        load_dotenv(Path(__file__).resolve().parent / ".env", override=False)
    except Exception:  # pragma: no cover - best effort
        pass

# Initialize once at import; can be refreshed later (after external dotenv load)
refresh_roots()
