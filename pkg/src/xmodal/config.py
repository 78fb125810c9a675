"""Flat ``key=value`` run and dataset-spec files, plus environment overrides.

Blank lines and ``#`` comments are ignored. Every key has a type; anything the
parser does not know, sees twice or cannot convert is a ``ConfigError`` naming
the key.
"""
from dataclasses import fields, replace
import logging
import os
from typing import Callable, Dict, Optional, Tuple

from .cma import CmaConfig
from .errors import ConfigError
from .formats import PathLike
from .synthdata import DatasetSpec
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

ENV_LOG_LEVEL = 'XMODAL_LOG_LEVEL'
ENV_THREADS = 'XMODAL_THREADS'


def _dims(text: str) -> Tuple[int, ...]:
    dims = tuple(int(part) for part in text.split(',') if part.strip())
    if not dims:
        raise ValueError('empty dimension list')
    return dims


def _pairs(text: str) -> Tuple[Tuple[int, int], ...]:
    pairs = []
    for chunk in text.split(','):
        chunk = chunk.strip()
        if not chunk:
            continue
        lo, sep, hi = chunk.partition('-')
        if not sep:
            raise ValueError(f'pair {chunk!r} is not written as a-b')
        pairs.append((int(lo), int(hi)))
    return tuple(pairs)


TRAIN_KEYS: Dict[str, Callable[[str], object]] = {
    'variant': str.strip,
    'epochs': int,
    'batch_size': int,
    'lr': float,
    'weight_decay': float,
    'tau': float,
    'num_negatives': int,
    'momentum': float,
    'seed': int,
    'view_noise': float,
    'hidden_dims': _dims,
    'head_dims': _dims,
    'cma_init_epoch': int,
}

# file key -> CmaConfig field
CMA_KEYS: Dict[str, Tuple[str, Callable[[str], object]]] = {
    'cma.k_pool': ('k_pool', int),
    'cma.k_p': ('k_p', int),
    'cma.k_n': ('k_n', int),
    'cma.lambda': ('lam', float),
    'cma.refresh_period': ('refresh_period', int),
    'cma.epochs': ('epochs', int),
}

SPEC_KEYS: Dict[str, Callable[[str], object]] = {
    'num_classes': int,
    'instances_per_class': int,
    'dim_a': int,
    'dim_b': int,
    'noise_sigma': float,
    'instance_sigma': float,
    'confound_pairs_a': _pairs,
    'confound_pairs_b': _pairs,
    'seed': int,
}


def parse_pairs(text: str) -> Dict[str, str]:
    """Raw ``key -> value`` strings of a config text, in file order."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f'line {lineno}: expected key=value, got {raw.strip()!r}')
        if key in out:
            raise ConfigError(f'line {lineno}: duplicate key', key)
        out[key] = value.strip()
    return out


def _convert(key: str, value: str, parser: Callable[[str], object]):
    try:
        return parser(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'cannot parse {value!r}: {exc}', key) from exc


def parse_train_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    values = {}
    cma_values = {}
    for key, value in parse_pairs(text).items():
        if key in TRAIN_KEYS:
            values[key] = _convert(key, value, TRAIN_KEYS[key])
        elif key in CMA_KEYS:
            name, parser = CMA_KEYS[key]
            cma_values[name] = _convert(key, value, parser)
        else:
            raise ConfigError('unknown key', key)
    config = replace(base or TrainConfig(), **values)
    if cma_values:
        config = replace(config, cma=replace(config.cma or CmaConfig(), **cma_values))
    config.validate()
    return config


def parse_dataset_spec(text: str) -> DatasetSpec:
    values = {}
    for key, value in parse_pairs(text).items():
        if key not in SPEC_KEYS:
            raise ConfigError('unknown key', key)
        values[key] = _convert(key, value, SPEC_KEYS[key])
    spec = DatasetSpec(**values)
    spec.validate()
    return spec


def _read_text(path: PathLike) -> str:
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f'cannot read {path}: {exc}') from exc


def load_train_config(path: PathLike, seed: Optional[int] = None) -> TrainConfig:
    """Parse a run config; ``seed`` (from ``--seed``) overrides the file."""
    config = parse_train_config(_read_text(path))
    if seed is not None:
        config = replace(config, seed=int(seed))
    logger.debug('loaded run config from %s: %s', path, config)
    return config


def load_dataset_spec(path: PathLike) -> DatasetSpec:
    return parse_dataset_spec(_read_text(path))


def dump_train_config(config: TrainConfig) -> str:
    """Inverse of ``parse_train_config`` (one key per line)."""
    lines = []
    for f in fields(TrainConfig):
        if f.name == 'cma':
            continue
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ','.join(str(v) for v in value)
        lines.append(f'{f.name}={value}')
    if config.cma is not None:
        for key, (name, _) in CMA_KEYS.items():
            lines.append(f'{key}={getattr(config.cma, name)}')
    return '\n'.join(lines) + '\n'


def env_log_level(default: str = 'INFO') -> str:
    return os.environ.get(ENV_LOG_LEVEL, default).upper()


def env_threads(default: int = 1) -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw is None or not raw.strip():
        return default
    threads = _convert(ENV_THREADS, raw, int)
    if threads < 1:
        raise ConfigError('must be >= 1', ENV_THREADS)
    return threads

