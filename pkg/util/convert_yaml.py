from pathlib import Path
from typing import Optional

import yaml
from pydantic import ValidationError

from exceptions import ConfigError
from models.run_config import RunConfig
from util.digest import payload_digest


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(source, f"not valid YAML ({e})")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(source, "top level must be a mapping of sections")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        path = ".".join(str(part) for part in first["loc"]) or source
        raise ConfigError(path, first["msg"])


def load_run_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(str(path), f"cannot read config ({e})")
    return parse_run_config(text, str(path))


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False, allow_unicode=True)


def config_hash(config: RunConfig) -> str:
    return payload_digest(config.model_dump(mode="json"))
