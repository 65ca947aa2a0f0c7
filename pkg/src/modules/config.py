"""Run configuration parsed from flat `key = value` files."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Tuple, Union

from .cardionet import EncoderConfig, NetConfig
from .errors import ConfigError
from .train_eval import REGIMES, TrainConfig

logger = logging.getLogger(__name__)

STANDARDIZE_MODES = ("unit", "mean")


@dataclass(frozen=True)
class RunConfig:
    segments_per_sample: int = 10
    segment_length: int = 1024
    stem_channels: int = 8
    block_depths: Tuple[int, ...] = (2, 2)
    growth_rate: int = 8
    head_grid: int = 4
    global_weight: float = 1.0
    standardize: str = "unit"
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 0
    seed: int = 0
    folds: int = 10
    holdout_fraction: float = 0.1
    stratify: bool = False
    folds_to_run: int = 0
    train_final: bool = True
    regime: str = "PositionDependent"
    manifest: str = ""
    output_dir: str = "out"

    def validate(self) -> RunConfig:
        """Check ranges; raise ConfigError naming the first offending key."""
        checks = [
            ("standardize", self.standardize in STANDARDIZE_MODES, f"one of {STANDARDIZE_MODES}"),
            ("learning_rate", self.learning_rate > 0, "positive"),
            ("batch_size", self.batch_size >= 1, "at least 1"),
            ("max_epochs", self.max_epochs >= 1, "at least 1"),
            ("patience", self.patience >= 0, "non-negative"),
            ("seed", self.seed >= 0, "non-negative"),
            ("folds", self.folds >= 2, "at least 2"),
            ("holdout_fraction", 0.0 <= self.holdout_fraction < 1.0, "in [0, 1)"),
            ("folds_to_run", 0 <= self.folds_to_run <= self.folds, "in [0, folds]"),
            ("regime", self.regime in REGIMES, f"one of {REGIMES}"),
        ]
        for key, ok, expectation in checks:
            if not ok:
                raise ConfigError(f"{key} = {getattr(self, key)!r} must be {expectation}")
        self.net_config.validate()
        return self

    @property
    def net_config(self) -> NetConfig:
        return NetConfig(
            segments_per_sample=self.segments_per_sample,
            segment_length=self.segment_length,
            encoder=EncoderConfig(self.stem_channels, tuple(self.block_depths), self.growth_rate),
            global_weight=self.global_weight,
            head_grid=self.head_grid,
        )

    def train_config(self, show_progress: bool = False) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.max_epochs, self.patience, show_progress)

    def override(self, **values: Any) -> RunConfig:
        """Copy with every non-None value replaced, validated."""
        changes = {key: value for key, value in values.items() if value is not None}
        unknown = set(changes) - {item.name for item in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        return dataclasses.replace(self, **changes).validate()


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _parse_depths(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


_PARSERS: Dict[str, Callable[[str], Any]] = {"int": int, "float": float, "bool": _parse_bool, "str": str}


def _parser_for(field: dataclasses.Field) -> Callable[[str], Any]:
    if field.name == "block_depths":
        return _parse_depths
    return _PARSERS[str(field.type)]


def parse_config_text(text: str, source: str = "config") -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment.

    Args:
        text (str): File contents.
        source (str, optional): Name used in diagnostics.

    Returns:
        RunConfig: Validated configuration; absent keys keep their defaults.
    """
    fields = {field.name: field for field in dataclasses.fields(RunConfig)}
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{source}: line {number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {number}: duplicate key {key!r}")
        try:
            values[key] = _parser_for(fields[key])(value)
        except ValueError as error:
            raise ConfigError(f"{source}: line {number}: bad value for {key}: {error}") from error
    try:
        return RunConfig(**values).validate()
    except ConfigError as error:
        raise ConfigError(f"{source}: {error}") from error


def format_config(config: RunConfig) -> str:
    """Render every key in declaration order, parseable by `parse_config_text`."""
    lines = []
    for field in dataclasses.fields(config):
        value = getattr(config, field.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(item) for item in value)
        else:
            text = str(value)
        lines.append(f"{field.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Read a config file; the defaults when `path` is None."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    config = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    logger.debug("loaded configuration from %s", path)
    return config
