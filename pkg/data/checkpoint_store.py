import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch

from config import CHECKPOINT_FORMAT_VERSION
from utils.error_handler import CheckpointFormatError

CHECKPOINT_KINDS = ('transfer', 'detector')


def config_fingerprint(kind: str, config: Dict[str, Any]) -> str:
    """Stable hash of a config snapshot"""
    key_data = {'kind': kind, 'config': config}
    key_string = json.dumps(key_data, sort_keys=True, default=str)
    return hashlib.md5(key_string.encode()).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    models: Dict[str, Dict[str, torch.Tensor]]
    iteration: int
    history: List[Dict[str, float]] = field(default_factory=list)
    optimizers: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.kind, self.config)


class CheckpointStore:
    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def save(self, checkpoint: Checkpoint) -> Path:
        if checkpoint.kind not in CHECKPOINT_KINDS:
            raise CheckpointFormatError(self.path, f"unknown checkpoint kind {checkpoint.kind!r}")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            'format_version': checkpoint.format_version,
            'kind': checkpoint.kind,
            'config': checkpoint.config,
            'fingerprint': checkpoint.fingerprint,
            'models': checkpoint.models,
            'optimizers': checkpoint.optimizers,
            'iteration': checkpoint.iteration,
            'history': checkpoint.history,
            'extra': checkpoint.extra,
        }
        # Atomic replace
        tmp_path = self.path.with_suffix(self.path.suffix + '.tmp')
        torch.save(payload, tmp_path)
        tmp_path.replace(self.path)
        logging.info(f"Saved {checkpoint.kind} checkpoint at iteration {checkpoint.iteration} to {self.path}")
        return self.path

    def load(self, expected_kind: Optional[str] = None) -> Checkpoint:
        if not self.path.exists():
            raise CheckpointFormatError(self.path, "checkpoint not found")
        try:
            payload = torch.load(self.path, map_location='cpu', weights_only=False)
        except Exception as e:
            raise CheckpointFormatError(self.path, f"unreadable checkpoint ({e})")

        if not isinstance(payload, dict) or 'format_version' not in payload:
            raise CheckpointFormatError(self.path, "missing format_version")
        if payload['format_version'] != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointFormatError(self.path, f"unsupported format_version {payload['format_version']}")
        if expected_kind is not None and payload.get('kind') != expected_kind:
            raise CheckpointFormatError(self.path, f"expected a {expected_kind} checkpoint, got {payload.get('kind')!r}")

        checkpoint = Checkpoint(
            kind=payload['kind'],
            config=payload['config'],
            models=payload['models'],
            iteration=int(payload['iteration']),
            history=list(payload.get('history', [])),
            optimizers=payload.get('optimizers', {}),
            extra=payload.get('extra', {}),
            format_version=payload['format_version'],
        )
        if payload.get('fingerprint') != checkpoint.fingerprint:
            raise CheckpointFormatError(self.path, "config fingerprint mismatch")
        logging.debug(f"Loaded {checkpoint.kind} checkpoint ({checkpoint.fingerprint[:8]}) from {self.path}")
        return checkpoint


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    return CheckpointStore(path).save(checkpoint)


def load_checkpoint(path: Union[str, Path], expected_kind: Optional[str] = None) -> Checkpoint:
    return CheckpointStore(path).load(expected_kind)
