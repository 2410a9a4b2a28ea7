"""Run configuration: tracker settings, backbone choice and output directories."""
from __future__ import annotations

import datetime as dt
import json
import platform
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import path_utils
from backbone_nn import ConvBackboneSpec, build_backbone_spec
from errors import ConfigurationError
from tracker import TrackerConfig

RUN_KEYS = {"backbone", "weights", "reps", "progress_every"}
CONFIG_VERSION = 1


@dataclass
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    backbone: str = "desk"
    weights: Optional[str] = None
    reps: int = 5
    progress_every: int = 10

    def backbone_spec(self) -> ConvBackboneSpec:
        return build_backbone_spec(self.backbone)

    def weights_path(self) -> Optional[Path]:
        if self.weights:
            return path_utils.resolve_project_path(self.weights)
        return path_utils.DEFAULT_WEIGHTS

    def validate(self) -> None:
        self.tracker.validate()
        build_backbone_spec(self.backbone)
        if self.reps < 1:
            raise ConfigurationError(f"reps must be >= 1, got {self.reps}")
        if self.progress_every < 1:
            raise ConfigurationError(f"progress_every must be >= 1, got {self.progress_every}")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {k: v for k, v in asdict(self).items() if k != "tracker"}
        data.update(self.tracker.to_dict())
        return data


def _load_json(path: Path) -> Dict[str, Any]:
    """Load a JSON object with error handling."""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Invalid JSON in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config {path} must hold a JSON object")
    return data


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Flat key set: every TrackerConfig field plus backbone / weights / reps / progress_every."""
    run_values = {k: v for k, v in data.items() if k in RUN_KEYS}
    tracker_values = {k: v for k, v in data.items() if k not in RUN_KEYS}
    cfg = RunConfig(tracker=TrackerConfig.from_dict(tracker_values), **run_values)
    cfg.validate()
    return cfg


def load_run_config(path: Optional[Path] = None, **overrides: Any) -> RunConfig:
    """Read a config file (or defaults) and apply non-None CLI overrides on top."""
    data: Dict[str, Any] = _load_json(Path(path)) if path else {}
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return config_from_dict(data)


# ---------------------------------------------------------
# Output directories
# ---------------------------------------------------------

def _scan_existing_run_numbers(root: Path) -> int:
    highest = 0
    if not root.exists():
        return highest
    for child in root.iterdir():
        if child.is_dir() and child.name.isdigit():
            highest = max(highest, int(child.name))
    return highest


def allocate_run_dir(root: Optional[Path] = None, width: int = 4) -> Path:
    """Next numbered directory under the output root (0001, 0002, ...)."""
    base = root or path_utils.OUTPUT_DIR
    base.mkdir(parents=True, exist_ok=True)
    run_dir = base / f"{_scan_existing_run_numbers(base) + 1:0{width}d}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _read_git_commit() -> Optional[str]:
    try:
        result = subprocess.check_output(["git", "rev-parse", "HEAD"], cwd=path_utils.CODE_ROOT,
                                         stderr=subprocess.DEVNULL)
        return result.decode().strip()
    except Exception:
        return None


def run_metadata(command: str, config: Optional[RunConfig] = None, **extra: Any) -> Dict[str, Any]:
    """Provenance block stored next to results; kept out of the deterministic result files."""
    metadata: Dict[str, Any] = {
        "version": CONFIG_VERSION,
        "command": command,
        "created_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        "host": platform.node(),
        "git_commit": _read_git_commit(),
    }
    if config is not None:
        metadata["config"] = config.to_dict()
    metadata.update(extra)
    return metadata
