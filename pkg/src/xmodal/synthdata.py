"""Synthetic paired-modality dataset with single-modality confounders.

Modality A stands in for video and modality B for audio. Each class has one
mean per modality on the unit sphere; a *confound pair* makes two classes share
a modality's mean, so that modality alone cannot tell them apart while the
other one can.

The default spec has far more input dimensions than the class means span, so
most of an anchor's variance is instance noise.
"""
from dataclasses import dataclass, field
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .formats import PathLike, Reader, Writer, read_bytes, sha256_bytes, write_bytes_atomic

logger = logging.getLogger(__name__)

MAGIC = b'XMDS'
VERSION = 1

Pair = Tuple[int, int]


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 16
    instances_per_class: int = 64
    dim_a: int = 256
    dim_b: int = 256
    noise_sigma: float = 0.05
    instance_sigma: float = 0.1
    confound_pairs_a: Tuple[Pair, ...] = ((0, 1), (2, 3), (4, 5), (6, 7))
    confound_pairs_b: Tuple[Pair, ...] = ((8, 9), (10, 11), (12, 13), (14, 15))
    seed: int = 0

    @property
    def num_instances(self) -> int:
        return self.num_classes * self.instances_per_class

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError('need at least 2 classes', 'num_classes')
        for name in ('instances_per_class', 'dim_a', 'dim_b'):
            if getattr(self, name) < 1:
                raise ConfigError('must be positive', name)
        for name in ('noise_sigma', 'instance_sigma'):
            if not getattr(self, name) > 0:
                raise ConfigError('must be > 0', name)
        seen_pairs = {}
        for name in ('confound_pairs_a', 'confound_pairs_b'):
            used = set()
            for pair in getattr(self, name):
                if len(pair) != 2:
                    raise ConfigError(f'{pair!r} is not a pair', name)
                lo, hi = sorted(int(c) for c in pair)
                if lo == hi:
                    raise ConfigError(f'pair {pair!r} repeats a class', name)
                if lo < 0 or hi >= self.num_classes:
                    raise ConfigError(f'pair {pair!r} outside [0, {self.num_classes})', name)
                if lo in used or hi in used:
                    raise ConfigError(f'pair {pair!r} overlaps another pair', name)
                used.update((lo, hi))
                if (lo, hi) in seen_pairs:
                    raise ConfigError(f'pair {pair!r} also listed in {seen_pairs[(lo, hi)]}', name)
                seen_pairs[(lo, hi)] = name


@dataclass(frozen=True)
class Instance:
    id: int
    label: int
    anchor_a: np.ndarray
    anchor_b: np.ndarray


@dataclass(frozen=True, eq=False)
class UnlabeledDataset:
    """What training is allowed to see: instance ids and modality anchors."""

    ids: np.ndarray
    anchors_a: np.ndarray
    anchors_b: np.ndarray
    digest: str

    def __len__(self):
        return len(self.ids)

    @property
    def dims(self) -> Tuple[int, int]:
        return self.anchors_a.shape[1], self.anchors_b.shape[1]

    def sample_views(self, ids: Sequence[int], rng: np.random.Generator, noise_sigma: float):
        return _noisy_views(self.anchors_a[ids], self.anchors_b[ids], rng, noise_sigma)


@dataclass(eq=False)
class Dataset:
    labels: np.ndarray
    anchors_a: np.ndarray
    anchors_b: np.ndarray
    num_classes: int
    spec: Optional[DatasetSpec] = field(default=None, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.anchors_a = np.asarray(self.anchors_a, dtype=np.float64)
        self.anchors_b = np.asarray(self.anchors_b, dtype=np.float64)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.anchors_a, other.anchors_a)
            and np.array_equal(self.anchors_b, other.anchors_b)
        )

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.labels), dtype=np.int64)

    def instance(self, idx: int) -> Instance:
        return Instance(int(idx), int(self.labels[idx]), self.anchors_a[idx], self.anchors_b[idx])

    def instances(self) -> List[Instance]:
        return [self.instance(i) for i in range(len(self))]

    def unlabeled(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.ids, self.anchors_a, self.anchors_b, self.digest())

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        w.pack('QIII', len(self), self.num_classes, self.anchors_a.shape[1], self.anchors_b.shape[1])
        record = _record_dtype(self.anchors_a.shape[1], self.anchors_b.shape[1])
        rows = np.zeros(len(self), dtype=record)
        rows['id'] = self.ids
        rows['label'] = self.labels
        rows['a'] = self.anchors_a
        rows['b'] = self.anchors_b
        w.array(rows, record)
        return w.getvalue()

    def digest(self) -> str:
        return sha256_bytes(self.to_bytes())


def _record_dtype(dim_a: int, dim_b: int) -> np.dtype:
    return np.dtype([('id', '<u8'), ('label', '<u4'), ('a', '<f8', (dim_a,)), ('b', '<f8', (dim_b,))])


def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means_a = _unit_rows(rng, spec.num_classes, spec.dim_a)
    means_b = _unit_rows(rng, spec.num_classes, spec.dim_b)
    for lo, hi in spec.confound_pairs_a:
        means_a[hi] = means_a[lo]
    for lo, hi in spec.confound_pairs_b:
        means_b[hi] = means_b[lo]

    labels = np.repeat(np.arange(spec.num_classes), spec.instances_per_class)
    anchors_a = means_a[labels] + spec.instance_sigma * rng.standard_normal((len(labels), spec.dim_a))
    anchors_b = means_b[labels] + spec.instance_sigma * rng.standard_normal((len(labels), spec.dim_b))
    logger.info(
        'generated %d instances, %d classes, %d+%d confound pairs',
        len(labels), spec.num_classes, len(spec.confound_pairs_a), len(spec.confound_pairs_b),
    )
    return Dataset(labels, anchors_a, anchors_b, spec.num_classes, spec=spec)


def _noisy_views(anchor_a, anchor_b, rng: np.random.Generator, noise_sigma: float):
    view_a = anchor_a + noise_sigma * rng.standard_normal(np.shape(anchor_a))
    view_b = anchor_b + noise_sigma * rng.standard_normal(np.shape(anchor_b))
    return view_a, view_b


def sample_view(instance: Instance, rng: np.random.Generator, noise_sigma: float):
    """Fresh stochastic (view_a, view_b) around the instance's anchors."""
    return _noisy_views(instance.anchor_a, instance.anchor_b, rng, noise_sigma)


def from_bytes(data: bytes, path: Optional[PathLike] = None) -> Dataset:
    r = Reader(data, MAGIC, path=path)
    count, num_classes, dim_a, dim_b = r.unpack('QIII')
    if num_classes < 2 or dim_a < 1 or dim_b < 1:
        r.fail(f'invalid header C={num_classes} dim_a={dim_a} dim_b={dim_b}', offset=8)
    record = _record_dtype(dim_a, dim_b)
    body_offset = r.offset
    rows = r.array(record, count)
    r.finish()
    ids = rows['id'].astype(np.int64)
    if not np.array_equal(ids, np.arange(count)):
        bad = int(np.argmax(ids != np.arange(count)))
        r.fail(f'instance ids not dense at record {bad}', offset=body_offset + bad * record.itemsize)
    labels = rows['label'].astype(np.int64)
    if count and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        r.fail(f'label {labels[bad]} >= C={num_classes}', offset=body_offset + bad * record.itemsize + 8)
    return Dataset(labels, rows['a'].astype(np.float64), rows['b'].astype(np.float64), num_classes)


def save(dataset: Dataset, path: PathLike) -> str:
    """Write ``dataset`` to ``path``; returns the file's SHA-256."""
    data = dataset.to_bytes()
    write_bytes_atomic(path, data)
    return sha256_bytes(data)


def load(path: PathLike) -> Dataset:
    return from_bytes(read_bytes(path), path=path)
