import os
import re
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from src.errors import ConfigError


ENV_PATTERN = re.compile(r"\$\{([A-Z0-9_]+)\}")

DEFAULT_SETTINGS_PATH = Path(__file__).resolve().parent.parent / "config" / "settings.yaml"


def _expand_env(value: Any) -> Any:
    if isinstance(value, str):
        def replace(match: re.Match) -> str:
            key = match.group(1)
            return os.environ.get(key, "")

        return ENV_PATTERN.sub(replace, value)
    if isinstance(value, dict):
        return {k: _expand_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_expand_env(v) for v in value]
    return value


def load_yaml(path: str) -> Dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Invalid YAML in {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return _expand_env(data)


@dataclass(frozen=True)
class Settings:
    """Library-wide tolerances and solver defaults."""

    row_sum_tol: float = 1e-10
    normalization_tol: float = 1e-12
    eps_div: float = 1e-9
    max_jump: int = 16
    solver_tol: float = 1e-12
    solver_max_iter: int = 100_000
    tol_det: float = 1e-8
    tol_rank: float = 1e-6
    truncation_mass_tol: float = 1e-6

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "Settings":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"Unknown settings: {sorted(unknown)}")
        values: Dict[str, Any] = {}
        for key, raw in data.items():
            default = getattr(cls, key)
            try:
                values[key] = type(default)(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"Setting {key}={raw!r} is not a valid {type(default).__name__}") from exc
            if values[key] <= 0:
                raise ConfigError(f"Setting {key} must be positive")
        return cls(**values)


def load_settings(path: Optional[str] = None) -> Settings:
    settings_path = Path(path) if path else DEFAULT_SETTINGS_PATH
    if not settings_path.exists():
        return Settings()
    data = load_yaml(str(settings_path))
    return Settings.from_mapping(data.get("tolerances", {}) | data.get("solvers", {}))


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return load_settings(os.environ.get("MEANFIELD_SETTINGS") or None)
