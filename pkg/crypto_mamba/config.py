"""
Run configuration

A run is described by one YAML file; individual keys can be overridden
from the command line with `--set dotted.key=value`.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .data import SplitSpec
from .errors import ConfigError
from .model import ModelConfig
from .trading import BacktestConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

CONFIG_ENV = "CRYPTOMAMBA_CONFIG"
LOG_LEVEL_ENV = "CRYPTOMAMBA_LOG_LEVEL"
DEFAULT_CONFIG_PATH = Path("configs/default.yaml")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    data_path: Path = Path("data/BTC-USD.csv")
    split: SplitSpec = Field(default_factory=SplitSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    backtest: BacktestConfig = Field(default_factory=BacktestConfig)
    output_dir: Path = Path("runs/default")

    def canonical(self) -> Dict[str, Any]:
        """JSON-compatible dump with stable key order"""
        return json.loads(self.model_dump_json())

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True)


def resolve_config_path(cli_value: Optional[str] = None) -> Path:
    """--config flag, then $CRYPTOMAMBA_CONFIG, then configs/default.yaml"""
    return Path(cli_value or os.environ.get(CONFIG_ENV) or DEFAULT_CONFIG_PATH)


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form dotted.key=value")
    key, text = item.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override '{item}' has an empty key")
    try:
        value = yaml.safe_load(text) if text.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"override '{item}': {e}")
    return key.split("."), value


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Set dotted keys in a nested mapping, creating sections as needed"""
    result = json.loads(json.dumps(raw, default=str))
    for item in overrides:
        parts, value = parse_override(item)
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{item}': '{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return result


def build_config(raw: Optional[Dict[str, Any]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    data = apply_overrides(raw or {}, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}")


def load_config(path: Union[str, Path, None] = None, overrides: Sequence[str] = ()) -> RunConfig:
    path = resolve_config_path(str(path) if path else None)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    config = build_config(raw, overrides)
    logger.info(f"Loaded config {path} (hash {config.config_hash()[:12]})")
    return config


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_yaml(), encoding="utf-8")
    return path
