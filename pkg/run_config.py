"""Run configuration shared by every CLI command.

Values are resolved in order: dataclass defaults, ``LANDSCAPE_<FIELD>``
environment variables (a ``.env`` file is honoured), an optional ``key = value``
config file read with python-dotenv, then explicit command-line flags.
"""

import os
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Any, Dict, List, Optional, get_type_hints

from dotenv import dotenv_values, load_dotenv

from convnet import PRECISIONS, ArchitectureConfig, TrainConfig, parse_width_scale
from database import atomic_write_text
from errors import ConfigError
from pipeline import SELECTION_POLICIES
from problems import suite_list
from sampling import SAMPLE_MODES

ENV_PREFIX = 'LANDSCAPE_'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')
SPLIT_NAMES = ('train', 'val', 'test')


@dataclass
class RunConfig:
    dim: int = 2
    classes: str = '12'
    instances_per_class: int = 250
    samples: int = 10000
    sample_mode: str = ''
    budget: Optional[int] = None
    runs: int = 5
    epsilon: float = 1e-8
    arch: str = 'a'
    width_scale: str = '1'
    epochs: int = 150
    batch: int = 60
    lr: float = 1e-4
    chunk_size: int = 20
    repetitions: int = 5
    selection: str = 'median'
    seed: int = 0
    workers: int = 1
    out: str = 'runs'
    manifest: str = ''
    checkpoint: str = ''
    run_store: str = ''
    split: str = 'test'
    class_id: int = 1
    instance_seed: int = 1
    log_level: str = 'INFO'
    precision: int = 8
    resize: bool = False

    def validate(self) -> 'RunConfig':
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.arch not in ('a', 'b'):
            raise ConfigError(f"arch must be 'a' or 'b', got {self.arch!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be 4 or 8 bytes, got {self.precision}")
        if self.sample_mode and self.sample_mode not in SAMPLE_MODES:
            raise ConfigError(f"sample_mode must be one of {SAMPLE_MODES}, got {self.sample_mode!r}")
        if self.selection not in SELECTION_POLICIES:
            raise ConfigError(f"selection must be one of {SELECTION_POLICIES}, got {self.selection!r}")
        if self.split not in SPLIT_NAMES:
            raise ConfigError(f"split must be one of {SPLIT_NAMES}, got {self.split!r}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {LOG_LEVELS}, got {self.log_level!r}")
        for name in ('instances_per_class', 'samples', 'runs', 'epochs', 'batch', 'chunk_size',
                     'repetitions', 'workers'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.budget is not None and self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.epsilon < 0 or self.lr <= 0:
            raise ConfigError(f"epsilon must be >= 0 and lr > 0 (got {self.epsilon}, {self.lr})")
        parse_width_scale(self.width_scale)
        self.class_ids()
        return self

    def class_ids(self) -> List[int]:
        """``classes`` is either a suite size ("12") or an explicit id list ("1,3,4")."""
        text = str(self.classes).strip()
        try:
            if ',' in text:
                return [int(c) for c in text.split(',') if c.strip()]
            return [fc.id for fc in suite_list(int(text))]
        except ValueError as e:
            raise ConfigError(f"classes must be a count or a comma-separated id list, got {text!r} ({e})")

    def budget_for(self, dim: Optional[int] = None) -> int:
        return self.budget if self.budget is not None else 10000 * (dim or self.dim)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def store_path(self) -> str:
        return self.run_store or os.path.join(self.out, 'runs.db')

    def arch_config(self, num_classes: int) -> ArchitectureConfig:
        return ArchitectureConfig(variant=self.arch, num_classes=num_classes,
                                  width_scale=parse_width_scale(self.width_scale))

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch, learning_rate=self.lr,
                           seed=self.seed, chunk_size=self.chunk_size)

    def dump(self, path: str):
        lines = [f"{key} = {'' if value is None else value}" for key, value in sorted(asdict(self).items())]
        atomic_write_text(path, '\n'.join(lines) + '\n')

    @classmethod
    def resolve(cls, overrides: Optional[Dict[str, Any]] = None, config_path: Optional[str] = None,
                environ: Optional[Dict[str, str]] = None) -> 'RunConfig':
        if environ is None:
            load_dotenv()
            environ = dict(os.environ)
        hints = get_type_hints(cls)
        values = asdict(cls())

        for f in fields(cls):
            raw = environ.get(ENV_PREFIX + f.name.upper())
            if raw is not None:
                values[f.name] = _convert(f.name, raw, hints[f.name], f"environment {ENV_PREFIX}{f.name.upper()}")

        if config_path:
            for key, raw in _read_config_file(config_path).items():
                if key not in values:
                    raise ConfigError(f"{config_path}: unknown setting {key!r}")
                values[key] = _convert(key, raw, hints[key], config_path)

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in values:
                raise ConfigError(f"Unknown setting {key!r}")
            values[key] = _convert(key, value, hints[key], 'command line') if isinstance(value, str) else value

        return cls(**values).validate()


def _convert(name: str, raw: Any, hint, source: str):
    text = str(raw).strip()
    optional = getattr(hint, '__args__', None)
    if optional and type(None) in optional:
        if text.lower() in ('', 'none'):
            return None
        hint = next(a for a in optional if a is not type(None))
    try:
        if hint is bool:
            if text.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if text.lower() in ('0', 'false', 'no', 'off', ''):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if name == 'width_scale':
            return str(Fraction(text))
        return text
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{source}: cannot read {name} = {text!r} as {getattr(hint, '__name__', hint)}")


def _read_config_file(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path, encoding='utf-8').items():
        if value is None:
            raise ConfigError(f"{path}: expected 'key = value' for {key!r}")
        values[key.replace('-', '_')] = value
    return values
