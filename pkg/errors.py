"""Error types raised across the tracker, its harnesses and the CLI."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Union


class IlnetError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigurationError(IlnetError, ValueError):
    """Layer geometry, head dimensions or config values do not fit together."""


class InputError(IlnetError, ValueError):
    """Caller handed over a degenerate box, too-small crop or mismatched list."""


class GridRangeError(IlnetError, IndexError):
    """A window or sample position falls outside a feature map."""


class WeightFormatError(IlnetError, ValueError):
    def __init__(self, message: str, *, offset: int, layer: Optional[str] = None):
        where = f" (layer {layer})" if layer else ""
        super().__init__(f"{message}{where} at byte offset {offset}")
        self.offset = offset
        self.layer = layer


class TrainingError(IlnetError, RuntimeError):
    def __init__(self, class_name: str, message: Optional[str] = None):
        super().__init__(message or f"No training samples for class '{class_name}'")
        self.class_name = class_name


class SamplingError(IlnetError, RuntimeError):
    def __init__(self, predicate: str, wanted: int, got: int, attempts: int):
        super().__init__(
            f"Sampler predicate '{predicate}' accepted {got}/{wanted} boxes after {attempts} attempts"
        )
        self.predicate = predicate
        self.wanted = wanted
        self.got = got
        self.attempts = attempts


class IngestionError(IlnetError, ValueError):
    def __init__(self, message: str, *, path: Union[str, Path], line: Optional[int] = None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = Path(path)
        self.line = line


class SynthSpecError(IlnetError, ValueError):
    """Synthetic sequence spec would push the target out of frame or below 16 px."""


class ResultsWriteError(IlnetError, OSError):
    def __init__(self, path: Union[str, Path], cause: Exception):
        super().__init__(f"Could not write {path}: {cause}")
        self.path = Path(path)
