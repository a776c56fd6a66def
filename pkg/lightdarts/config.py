"""
Configuration management for light-DARTS runs.

Effective values come from, in decreasing priority: command-line flags, a flat
``key=value`` config file, ``LIGHTDARTS_*`` environment variables, defaults.
"""

from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Union

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigFileError
from .models import SearchConfig
from .supernet import SEARCH_SPACES, canonical_primitives

VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class RunConfig(BaseSettings):
    """
    Run configuration with validation.

    Every field can be set from the environment as ``LIGHTDARTS_<FIELD>``.
    """

    # Search
    epochs: int = Field(50, ge=1)
    lr: float = Field(1e-4, gt=0.0)
    arch_lr: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(16, ge=1)
    cells: int = Field(8, ge=1)
    init_channels: int = Field(16, ge=2)
    nodes: int = Field(4, ge=1)
    seed: int = Field(0, ge=0)
    order: Literal["first", "second"] = "first"
    unrolled_lr: Optional[float] = Field(None, ge=0.0)
    primitives: str = Field("light", description="Preset name or comma-separated op names")

    # Retraining
    retrain_epochs: Optional[int] = Field(None, ge=1)
    retrain_lr: Optional[float] = Field(None, gt=0.0)

    # Data
    frames: int = Field(40, ge=1)
    eval_batch_size: int = Field(32, ge=1)

    # Logging
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="LIGHTDARTS_", case_sensitive=False, extra="ignore"
    )

    @field_validator("primitives", mode="before")
    @classmethod
    def parse_primitives(cls, v):
        """Normalise a preset name, a comma-separated string or a list of op names."""
        if isinstance(v, str):
            if v.strip() in SEARCH_SPACES:
                return v.strip()
            v = [name.strip() for name in v.split(",") if name.strip()]
        return ",".join(canonical_primitives(v))

    @property
    def primitive_names(self) -> List[str]:
        return list(SEARCH_SPACES.get(self.primitives) or self.primitives.split(","))

    @field_validator("init_channels")
    @classmethod
    def validate_even(cls, v):
        if v % 2:
            raise ValueError(f"init_channels must be even, got {v}")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level."""
        if v.upper() not in VALID_LOG_LEVELS:
            raise ValueError(f"Log level must be one of {VALID_LOG_LEVELS}")
        return v.upper()

    def search_config(self) -> SearchConfig:
        values = {k: v for k, v in self.model_dump().items() if k in SearchConfig.model_fields}
        values["primitives"] = self.primitive_names
        return SearchConfig(**values)

    def dump(self, extra: Optional[Mapping[str, object]] = None) -> str:
        """
        Effective values as sorted ``key=value`` lines, readable by ``--config``.

        Unset optional values are left out.
        """
        values: Dict[str, object] = dict(self.model_dump())
        values.update(extra or {})
        lines = []
        for key in sorted(values):
            value = values[key]
            if value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(str(item) for item in value)
            lines.append(f"{key}={value}\n")
        return "".join(lines)


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse flat ``key=value`` lines; blank lines and ``#`` comments are skipped.

    Raises:
        ConfigFileError: With the number of the first malformed line
    """
    values: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_").lower()
        if not sep or not key:
            raise ConfigFileError(f"expected key=value, got {raw!r}", line_no)
        if not key.replace("_", "").replace("-", "").isalnum():
            raise ConfigFileError(f"invalid key {key!r}", line_no)
        if key in values:
            raise ConfigFileError(f"duplicate key {key!r}", line_no)
        values[key] = value.strip()
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def resolve_config(
    overrides: Optional[Mapping[str, object]] = None,
    file_values: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Merge config-file values and flag overrides into a validated RunConfig.

    ``None`` overrides mean "not given on the command line". Environment
    variables fill whatever neither source sets.
    """
    merged: Dict[str, object] = {
        key: value for key, value in (file_values or {}).items() if key in RunConfig.model_fields
    }
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**merged)
