"""Run-config files and run manifests.

Config files are YAML mappings whose keys are config field names, either at
the top level or under a section named after the command::

    train-detector:
      style_prob: 0.2
      iterations: 2000

Values resolve as built-in defaults < config file < command-line flags.
"""
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

import click
import yaml
from pydantic import BaseModel, ValidationError

from config import MANIFEST_FILE, MANIFEST_FORMAT_VERSION
from utils.error_handler import ArtifactFormatError

ConfigT = TypeVar('ConfigT', bound=BaseModel)

COMMANDS = ('gen-data', 'train-transfer', 'train-detector', 'infer', 'eval', 'eval-transfer')


def load_config_file(path: Optional[Union[str, Path]], command: Optional[str] = None) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise click.UsageError(f"Config file {path} is not valid YAML: {e}")
    if not isinstance(data, dict):
        raise click.UsageError(f"Config file {path} must hold a mapping of config keys")
    if any(k in COMMANDS for k in data):
        # Sectioned file: only the running command's section applies
        data = data.get(command) or {}
        if not isinstance(data, dict):
            raise click.UsageError(f"Section {command!r} of {path} must be a mapping")
    logging.debug(f"Loaded {len(data)} config keys from {path}")
    return data


def resolve_config(model_cls: Type[ConfigT], file_values: Mapping[str, Any],
                   overrides: Optional[Mapping[str, Any]] = None) -> ConfigT:
    """Defaults < file values < overrides; None overrides mean 'flag not given'"""
    unknown = sorted(set(file_values) - set(model_cls.model_fields))
    if unknown:
        raise click.UsageError(f"Unknown {model_cls.__name__} keys in config file: {', '.join(unknown)}")
    merged = dict(file_values)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return model_cls(**merged)
    except ValidationError as e:
        raise click.UsageError(f"Invalid {model_cls.__name__}: {e}")


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    artifacts: Dict[str, str] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    argv: list = field(default_factory=lambda: list(sys.argv))
    started_at: str = field(default_factory=lambda: time.strftime('%Y-%m-%dT%H:%M:%S'))
    wall_clock_seconds: float = 0.0
    format_version: int = MANIFEST_FORMAT_VERSION

    def finish(self, started: float) -> 'RunManifest':
        self.wall_clock_seconds = round(time.perf_counter() - started, 3)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def write_manifest(manifest: RunManifest, out_dir: Union[str, Path], name: str = MANIFEST_FILE) -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True, default=str)
    logging.info(f"Wrote run manifest to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.exists():
        raise ArtifactFormatError(path, "manifest not found")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ArtifactFormatError(path, f"invalid JSON ({e})")
    if data.get('format_version') != MANIFEST_FORMAT_VERSION:
        raise ArtifactFormatError(path, f"unsupported format_version {data.get('format_version')}")
    try:
        return RunManifest(**data)
    except TypeError as e:
        raise ArtifactFormatError(path, f"bad manifest fields ({e})")
