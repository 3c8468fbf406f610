"""Utility functions and logging setup for the annotation refinement toolkit."""

import logging
import sys
import time
from collections.abc import Callable, Mapping
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any

import numpy as np


def setup_logging(
    log_level: str = "INFO", debug_mode: bool = False, log_file: str | None = None
) -> logging.Logger:
    """Set up logging configuration."""

    # Create logs directory if needed
    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

    if debug_mode:
        log_format = "%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s"
    else:
        log_format = "%(asctime)s - %(levelname)s - %(message)s"

    # stdout carries command output (tables, CSV), so logs go to stderr
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format=log_format,
        handlers=handlers,
        force=True,
    )

    logger = logging.getLogger("NoisyAnno")
    logger.debug(f"Logging initialized - Level: {log_level}, Debug: {debug_mode}")

    return logger


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Random stream for (seed, keys...); independent of call order."""
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError(f"Seed material must be non-negative: {seed}, {keys}")
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def box_key(coords: tuple[float, float, float, float]) -> int:
    """Stable integer key from the exact bits of four float coordinates."""
    raw = np.asarray(coords, dtype="<f8").tobytes()
    return int.from_bytes(raw, "little")


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def mistyped_fields(cls: type, values: Mapping[str, Any]) -> list[str]:
    """Keys of ``values`` whose type does not fit the dataclass field's default.

    A ``None`` default means an optional integer. Fields without a plain
    default are left to the caller.
    """
    defaults = {f.name: f.default for f in fields(cls) if f.default is not MISSING}
    bad = []
    for key, value in values.items():
        if key not in defaults:
            continue
        default = defaults[key]
        if default is None:
            ok = value is None or _is_int(value)
        elif isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = _is_int(value)
        elif isinstance(default, float):
            ok = _is_int(value) or isinstance(value, float)
        else:
            ok = isinstance(value, type(default))
        if not ok:
            bad.append(key)
    return bad


def epoch_filename(directory: str | Path, epoch: int, base_name: str = "refined") -> Path:
    """Numbered per-epoch output file, e.g. refined_epoch_002.json."""
    Path(directory).mkdir(parents=True, exist_ok=True)
    return Path(directory) / f"{base_name}_epoch_{epoch:03d}.json"


def format_percent(value: float | None, digits: int = 2) -> str:
    """Format a fraction as a percentage; None renders as n/a."""
    if value is None:
        return "n/a"
    return f"{value * 100:.{digits}f}"


class EpochTimer:
    """Wall-clock duration of one epoch, used as a context manager."""

    def __init__(self):
        self._start: float | None = None
        self.elapsed = 0.0

    def __enter__(self) -> "EpochTimer":
        self._start = time.perf_counter()
        self.elapsed = 0.0
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed = time.perf_counter() - self._start


_CALLBACK_PREFIX = {logging.WARNING: "WARNING: ", logging.ERROR: "ERROR: "}


class CallbackLogger:
    """Logger that also forwards progress lines to a callback (the CLI echoes them).

    Debug messages only reach the logger.
    """

    def __init__(self, logger: logging.Logger, callback: Callable[[str], None] | None = None):
        self.logger = logger
        self.callback = callback

    def _emit(self, level: int, msg: str) -> None:
        self.logger.log(level, msg)
        if self.callback and level >= logging.INFO:
            self.callback(_CALLBACK_PREFIX.get(level, "") + msg)

    def debug(self, msg: str) -> None:
        self._emit(logging.DEBUG, msg)

    def info(self, msg: str) -> None:
        self._emit(logging.INFO, msg)

    def warning(self, msg: str) -> None:
        self._emit(logging.WARNING, msg)

    def error(self, msg: str) -> None:
        self._emit(logging.ERROR, msg)
