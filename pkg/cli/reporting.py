"""Run directories and report files (JSON manifests, CSV tables, text tables)."""

import json
import sys
from dataclasses import dataclass
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional, Union

import pandas as pd
from loguru import logger

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {message}"


@dataclass
class RunDir:
    path: Path
    sink_id: Optional[int] = None

    def file(self, name: str) -> Path:
        return self.path / name

    def close(self) -> None:
        if self.sink_id is not None:
            logger.remove(self.sink_id)
            self.sink_id = None


def create_run_dir(root: Union[str, Path], command: str, config: Optional[dict] = None) -> RunDir:
    """``<root>/<command>_<YYYYMMDD_HHMMSS>/`` with a ``run.log`` sink and a config snapshot."""
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    path = Path(root) / f"{command}_{timestamp}"
    suffix = 1
    while path.exists():
        path = Path(root) / f"{command}_{timestamp}_{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    sink = logger.add(path / "run.log", level="DEBUG", format=LOG_FORMAT)
    run = RunDir(path, sink)
    if config is not None:
        write_json(config, run.file("config.json"))
    logger.info(f"run directory: {path}")
    return run


def open_run_dir(path: Union[str, Path]) -> RunDir:
    """Reattach to an existing run directory; logging appends to its ``run.log``."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"run directory not found: {path}")
    return RunDir(path, logger.add(path / "run.log", level="DEBUG", format=LOG_FORMAT))


def configure_console(level: str = "INFO") -> None:
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)


def _default(value: Any):
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Fraction):
        return float(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(data: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, default=_default, allow_nan=True))
    return path


def write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False)
    return path


def render_frame(frame: pd.DataFrame) -> str:
    with pd.option_context("display.width", 200, "display.max_columns", None, "display.max_colwidth", 80):
        return frame.to_string(index=False)


def emit(text: str, path: Optional[Union[str, Path]] = None) -> None:
    """Print a rendered table to stdout and optionally keep a copy."""
    print(text)
    if path is not None:
        Path(path).write_text(text + "\n")
