"""Configuration management for refinement runs."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from center_matching import MatchParams
from cinj import threshold_rank
from sim_detector import OracleConfig, OracleConfigError
from utils import mistyped_fields

LABEL_REFINEMENT_MODES = ("full", "judge_only", "relabel_all", "off")
BOX_REFINEMENT_MODES = ("full", "center_matching", "off")


class ConfigError(Exception):
    """Custom exception for configuration errors."""

    pass


def _default_schedule() -> list[OracleConfig]:
    return [OracleConfig.preset("high")]


@dataclass
class PipelineConfig:
    """Hyperparameters and run settings of the refinement pipeline."""

    # Center matching
    alpha: float = 0.2
    t_cm: float = 0.9
    gamma: float = 0.1

    # Noise judgment
    queue_length: int = 128
    acceptance_rate: float = 0.8
    t_refine: float = 0.5

    # Schedule
    warm_up_epochs: int = 1
    epochs: int = 1
    seed: int | None = None
    oracle_schedule: list[OracleConfig] = field(default_factory=_default_schedule)
    refine_boxes_during_warmup: bool = True
    carry_annotations: bool = False

    # Ablation switches
    label_refinement: str = "full"
    box_refinement: str = "full"

    # Execution and evaluation
    threads: int = 1
    corloc_iou: float = 0.7
    histogram_bins: int = 20
    write_outcome_csv: bool = False

    # Debug settings
    debug_mode: bool = False
    log_level: str = "INFO"

    @property
    def total_epochs(self) -> int:
        return self.warm_up_epochs + self.epochs

    def match_params(self) -> MatchParams:
        return MatchParams(t_cm=self.t_cm, alpha=self.alpha, gamma=self.gamma)

    def oracle_for_epoch(self, epoch: int) -> OracleConfig:
        """Schedule entry for a 0-based epoch; the last entry repeats."""
        ocfg = self.oracle_schedule[min(epoch, len(self.oracle_schedule) - 1)]
        if ocfg.seed is None:
            state = np.random.SeedSequence([self.seed or 0, epoch]).generate_state(1)
            ocfg = replace(ocfg, seed=int(state[0]))
        return ocfg

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["oracle_schedule"] = [o.to_dict() for o in self.oracle_schedule]
        return data


def _parse_schedule(raw: Any) -> list[OracleConfig]:
    if isinstance(raw, (str, dict)):
        raw = [raw]
    if not isinstance(raw, (list, tuple)):
        raise ConfigError(
            f"oracle_schedule must be a preset name, an object or a list, got {raw!r}"
        )
    schedule = []
    for entry in raw:
        if isinstance(entry, str):
            schedule.append(OracleConfig.preset(entry))
        elif isinstance(entry, dict):
            schedule.append(OracleConfig.from_dict(entry))
        elif isinstance(entry, OracleConfig):
            schedule.append(entry)
        else:
            raise ConfigError(f"Invalid oracle_schedule entry: {entry!r}")
    return schedule


class ConfigManager:
    """Manages configuration loading, overriding, saving, and validation."""

    def __init__(self, config_file: str | Path | None = None):
        self.config_file = Path(config_file) if config_file else None
        self.config = PipelineConfig()
        self.logger = logging.getLogger(__name__)

    def load_config(self) -> PipelineConfig:
        """Load configuration from file; without a file the defaults stand."""
        if self.config_file is None:
            self.logger.debug("No config file given, using defaults")
            return self.config
        try:
            with open(self.config_file) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {self.config_file}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {self.config_file} must be a JSON object")

        known = {f.name for f in fields(PipelineConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys in {self.config_file}: {unknown}")

        self.apply_overrides(**data)
        self.logger.info(f"Configuration loaded from {self.config_file}")
        return self.config

    def apply_overrides(self, **overrides: Any) -> PipelineConfig:
        """Apply values that are not None; command-line flags win over the file."""
        values = {k: v for k, v in overrides.items() if v is not None}
        bad = mistyped_fields(PipelineConfig, values)
        if bad:
            details = ", ".join(f"{key}={values[key]!r}" for key in bad)
            raise ConfigError(f"Invalid configuration value types: {details}")
        if "oracle_schedule" in values:
            try:
                values["oracle_schedule"] = _parse_schedule(values["oracle_schedule"])
            except OracleConfigError as e:
                raise ConfigError(str(e)) from e
        try:
            self.config = replace(self.config, **values)
        except TypeError as e:
            raise ConfigError(f"Invalid configuration override: {e}") from e
        return self.config

    def save_config(self, path: str | Path | None = None) -> Path:
        """Save current configuration to file."""
        target = Path(path) if path else self.config_file
        if target is None:
            raise ConfigError("No path to save the configuration to")
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w") as f:
            json.dump(self.config.to_dict(), f, indent=2)
            f.write("\n")
        self.logger.info(f"Configuration saved to {target}")
        return target

    def validate_config(self) -> list[str]:
        """Validate configuration and return list of issues."""
        c = self.config
        issues = []

        if not (0.0 <= c.alpha <= 1.0):
            issues.append("alpha must be between 0 and 1")
        if not (0.0 < c.t_refine < 1.0):
            issues.append("t_refine must be strictly between 0 and 1")
        if c.t_cm > 1.0:
            issues.append("t_cm must be at most 1")
        if c.gamma < 0.0:
            issues.append("gamma must be non-negative")
        if c.queue_length < 1:
            issues.append("queue_length must be positive")
        if not (0.0 < c.acceptance_rate <= 1.0):
            issues.append("acceptance_rate must be in (0, 1]")
        elif c.queue_length >= 1 and threshold_rank(c.acceptance_rate, c.queue_length) < 1:
            issues.append("acceptance_rate * queue_length must be at least 1")
        if c.epochs < 1:
            issues.append("epochs must be at least 1")
        if c.warm_up_epochs < 0:
            issues.append("warm_up_epochs must be non-negative")
        if c.seed is not None and (isinstance(c.seed, bool) or not isinstance(c.seed, int) or c.seed < 0):
            issues.append("seed must be a non-negative integer")
        if not c.oracle_schedule:
            issues.append("oracle_schedule must have at least one entry")
        if c.label_refinement not in LABEL_REFINEMENT_MODES:
            issues.append(f"label_refinement must be one of {LABEL_REFINEMENT_MODES}")
        if c.box_refinement not in BOX_REFINEMENT_MODES:
            issues.append(f"box_refinement must be one of {BOX_REFINEMENT_MODES}")
        if c.threads < 1:
            issues.append("threads must be at least 1")
        if not (0.0 <= c.corloc_iou < 1.0):
            issues.append("corloc_iou must be in [0, 1)")
        if c.histogram_bins < 1:
            issues.append("histogram_bins must be at least 1")
        if c.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            issues.append(f"Unknown log level {c.log_level}")

        return issues

    def validated(self) -> PipelineConfig:
        """Return the configuration or raise ConfigError listing every issue."""
        issues = self.validate_config()
        if issues:
            raise ConfigError("; ".join(issues))
        return self.config
