import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from errors import ConfigError
from models import ExperimentConfig

load_dotenv()


class Settings:
    DATA_DIR: str = os.getenv("ASEG_DATA_DIR", "./data")
    RUN_DIR: str = os.getenv("ASEG_RUN_DIR", "./runs/default")
    CHECKPOINT: Optional[str] = os.getenv("ASEG_CHECKPOINT")
    LOG_LEVEL: str = os.getenv("ASEG_LOG_LEVEL", "INFO")


settings = Settings()

_TUPLE_FIELDS = {"cmam_stages", "ladder"}


def _normalise(raw: Mapping[str, Any]) -> Dict[str, Any]:
    """Turn key=value strings into ExperimentConfig keyword arguments."""
    values: Dict[str, Any] = {}
    for key, value in raw.items():
        if value is None:
            continue
        key = key.strip().lower().replace("-", "_")
        if key in _TUPLE_FIELDS and isinstance(value, str):
            value = tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        if key == "fusion" and value in ("", "none"):
            value = None
        values[key] = value
    return values


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a flat key=value file plus overrides.

    Later sources win: defaults, then the file, then `overrides` (CLI flags).
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(_normalise(dotenv_values(path)))
    values.update(_normalise(overrides or {}))
    unknown = set(values) - set(ExperimentConfig.model_fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        return ExperimentConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def dump_experiment_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write the effective config as key=value lines that load_experiment_config reads back."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
