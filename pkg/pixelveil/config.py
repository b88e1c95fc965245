"""Config files, output-directory resolution and the per-report config echo"""

import argparse
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import yaml

from .errors import DataError, UsageError, ValidationError

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "PIXELVEIL_OUTPUT_DIR"

# CLI flags that never enter a report's config echo
GLOBAL_KEYS = frozenset({"verbose", "quiet", "workers", "json", "config", "output",
                         "handler", "command", "method"})

REQUIRED_EXPERIMENT_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "seed")


def read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    """Top-level mapping of a YAML file; an empty file is an empty mapping"""
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise DataError(f"malformed config {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a mapping at top level")
    return data


def apply_config(args: argparse.Namespace, data: Dict[str, Any]) -> argparse.Namespace:
    """
    Override parsed flags with config-file values.

    Keys may use dashes or underscores; a key naming no flag of the
    subcommand is a usage error.
    """
    known = set(vars(args)) - GLOBAL_KEYS
    for key, value in data.items():
        dest = str(key).replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key '{key}' for '{args.command}'")
        setattr(args, dest, value)
    return args


def output_path(path: Union[str, Path]) -> Path:
    """Relative output paths land under $PIXELVEIL_OUTPUT_DIR when it is set"""
    path = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _plain(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_echo(args: argparse.Namespace) -> Dict[str, Any]:
    """Every subcommand option with its effective value, JSON-serializable"""
    return {k: _plain(v) for k, v in sorted(vars(args).items()) if k not in GLOBAL_KEYS}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything `pixelveil run` needs for one end-to-end experiment"""
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    seed: str
    m: float = 10.0
    reps_h: int = 4
    reps_v: int = 4
    margin: int = 4
    symmetry: str = "horizontal"
    target: int = 5
    rate: float = 0.05
    selection_seed: int = 0
    hidden: List[int] = field(default_factory=lambda: [256, 128])
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    train_seed: int = 0
    augment: List[str] = field(default_factory=list)
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValidationError(f"poison rate must lie in [0, 1], got {self.rate}")
        if self.target < 0:
            raise ValidationError(f"target class must be non-negative, got {self.target}")

    @classmethod
    def field_names(cls) -> Iterable[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        names = set(cls.field_names())
        normalized = {str(k).replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(normalized) - names)
        if unknown:
            raise UsageError(f"unknown experiment config key(s): {', '.join(unknown)}")
        missing = [n for n in REQUIRED_EXPERIMENT_KEYS if n not in normalized]
        if missing:
            raise UsageError(f"experiment config is missing: {', '.join(missing)}")
        if not isinstance(normalized["seed"], str):
            raise UsageError("experiment seed must be a quoted hex string")
        return cls(**normalized)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return cls.from_mapping(read_yaml(path))
