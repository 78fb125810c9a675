"""Slow-moving per-instance memory targets for both modalities.

Row ``i`` of ``video_mem`` / ``audio_mem`` is the exponential moving average of
instance ``i``'s embeddings, kept on the unit sphere. The bank also holds the
NCE partition constants Z̄, estimated once and then frozen: one pair for
embeddings contrasted against the other modality's memory (AVID) and one
pair for embeddings contrasted against their own modality's memory (wMPD).
"""
import logging
import math
import threading
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .formats import PathLike, Reader, Writer, read_bytes, write_bytes_atomic

logger = logging.getLogger(__name__)

MAGIC = b'XMMB'
VERSION = 2

MODALITIES = ('video', 'audio')


class MemoryBank:
    def __init__(self, video_mem: np.ndarray, audio_mem: np.ndarray, momentum: float = 0.5,
                 zbar_v: Optional[float] = None, zbar_a: Optional[float] = None,
                 within_zbar_v: Optional[float] = None, within_zbar_a: Optional[float] = None):
        video_mem = np.asarray(video_mem, dtype=np.float64)
        audio_mem = np.asarray(audio_mem, dtype=np.float64)
        if video_mem.ndim != 2 or video_mem.shape != audio_mem.shape:
            raise ShapeError(f'memory shapes differ: video {video_mem.shape}, audio {audio_mem.shape}')
        if not 0.0 < momentum < 1.0:
            raise ContractError(f'momentum must lie in (0, 1), got {momentum}')
        self.video_mem = nx.l2_normalize_rows(video_mem)
        self.audio_mem = nx.l2_normalize_rows(audio_mem)
        self.momentum = float(momentum)
        self.zbar_v = zbar_v
        self.zbar_a = zbar_a
        self.within_zbar_v = within_zbar_v
        self.within_zbar_a = within_zbar_a
        self._lock = threading.Lock()

    def __len__(self):
        return self.video_mem.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.video_mem.shape[1]

    @property
    def frozen(self) -> bool:
        return self.zbar_v is not None and self.zbar_a is not None

    @property
    def within_frozen(self) -> bool:
        return self.within_zbar_v is not None and self.within_zbar_a is not None

    def memory(self, modality: str) -> np.ndarray:
        if modality == 'video':
            return self.video_mem
        if modality == 'audio':
            return self.audio_mem
        raise ValueError(f'unknown modality {modality!r}')

    def zbar(self, modality: str) -> float:
        value = self.zbar_v if modality == 'video' else self.zbar_a
        if value is None:
            raise ContractError(f'partition constant for {modality} memory has not been estimated')
        return value

    def within_zbar(self, modality: str) -> float:
        value = self.within_zbar_v if modality == 'video' else self.within_zbar_a
        if value is None:
            raise ContractError(f'within-modality partition constant for {modality} memory has not been estimated')
        return value

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise IndexError(f'instance id out of range [0, {len(self)}): {ids.min()}..{ids.max()}')
        return ids

    def rows(self, modality: str, ids) -> np.ndarray:
        return self.memory(modality)[self._check_ids(ids)]

    def ema_update(self, ids: Sequence[int], new_v: np.ndarray, new_a: np.ndarray):
        """row <- normalize(m * row + (1 - m) * new) for the listed rows only."""
        ids = self._check_ids(ids)
        if len(np.unique(ids)) != len(ids):
            raise ContractError('ema_update ids must be distinct')
        new_v = np.asarray(new_v, dtype=np.float64)
        new_a = np.asarray(new_a, dtype=np.float64)
        if new_v.shape != (len(ids), self.embed_dim) or new_a.shape != new_v.shape:
            raise ShapeError(f'ema_update expects ({len(ids)}, {self.embed_dim}) features, got {new_v.shape}/{new_a.shape}')
        m = self.momentum
        with self._lock:
            self.video_mem[ids] = nx.l2_normalize_rows(m * self.video_mem[ids] + (1.0 - m) * new_v)
            self.audio_mem[ids] = nx.l2_normalize_rows(m * self.audio_mem[ids] + (1.0 - m) * new_a)

    def sample_negatives(self, i: int, k: int, rng: np.random.Generator, exclude: Optional[Sequence[int]] = None) -> np.ndarray:
        """``k`` ids drawn i.i.d. uniformly, with replacement, from all ids except ``i`` and ``exclude``."""
        if k < 1:
            raise ContractError(f'need at least one negative, got K={k}')
        self._check_ids([i])
        banned = np.asarray([i] if exclude is None else [i, *exclude], dtype=np.int64)
        pool = np.setdiff1d(np.arange(len(self)), self._check_ids(banned), assume_unique=False)
        if pool.size == 0:
            raise ContractError(f'no candidates left for negatives of instance {i}')
        return pool[rng.integers(pool.size, size=k)]

    def sample_negatives_batch(self, ids: Sequence[int], k: int, rng: np.random.Generator,
                               exclude: Optional[Sequence[Sequence[int]]] = None) -> np.ndarray:
        """One ``sample_negatives`` row per id, consuming ``rng`` in id order."""
        rows = []
        for pos, i in enumerate(ids):
            rows.append(self.sample_negatives(int(i), k, rng, None if exclude is None else exclude[pos]))
        return np.stack(rows) if rows else np.zeros((0, k), dtype=np.int64)

    def estimate_zbar(self, probe_v: np.ndarray, probe_a: np.ndarray, tau: float):
        """Estimate and freeze Z̄ for each memory.

        ``probe_v`` are the embeddings that will be contrasted against video
        memories and ``probe_a`` those contrasted against audio memories. Z̄ is
        the mean of exp(x . row / tau) over probe rows x and all memory rows.
        """
        if self.zbar_v is not None or self.zbar_a is not None:
            raise ContractError('partition constants are frozen; estimate_zbar may run only once')
        self.zbar_v = partition_estimate(probe_v, self.video_mem, tau)
        self.zbar_a = partition_estimate(probe_a, self.audio_mem, tau)
        logger.info('froze partition constants zbar_v=%.6f zbar_a=%.6f (tau=%g)', self.zbar_v, self.zbar_a, tau)
        return self.zbar_v, self.zbar_a

    def estimate_within_zbar(self, probe_v: np.ndarray, probe_a: np.ndarray, tau: float):
        """Estimate and freeze Z̄ for embeddings scored against their own modality.

        Same estimator as ``estimate_zbar`` with video embeddings probing the
        video memory and audio embeddings the audio memory.
        """
        if self.within_zbar_v is not None or self.within_zbar_a is not None:
            raise ContractError('within-modality partition constants are frozen; estimate_within_zbar may run only once')
        self.within_zbar_v = partition_estimate(probe_v, self.video_mem, tau)
        self.within_zbar_a = partition_estimate(probe_a, self.audio_mem, tau)
        logger.info('froze within-modality partition constants zbar_v=%.6f zbar_a=%.6f (tau=%g)',
                    self.within_zbar_v, self.within_zbar_a, tau)
        return self.within_zbar_v, self.within_zbar_a

    def copy(self) -> 'MemoryBank':
        bank = MemoryBank.__new__(MemoryBank)
        bank.video_mem = self.video_mem.copy()
        bank.audio_mem = self.audio_mem.copy()
        bank.momentum = self.momentum
        bank.zbar_v = self.zbar_v
        bank.zbar_a = self.zbar_a
        bank.within_zbar_v = self.within_zbar_v
        bank.within_zbar_a = self.within_zbar_a
        bank._lock = threading.Lock()
        return bank

    def __deepcopy__(self, memo):
        return self.copy()

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        w.pack('QI', len(self), self.embed_dim)
        w.pack('ddd', self.momentum, _or_nan(self.zbar_v), _or_nan(self.zbar_a))
        w.pack('dd', _or_nan(self.within_zbar_v), _or_nan(self.within_zbar_a))
        w.array(self.video_mem, '<f8')
        w.array(self.audio_mem, '<f8')
        return w.getvalue()

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            self.momentum == other.momentum
            and self.zbar_v == other.zbar_v
            and self.zbar_a == other.zbar_a
            and self.within_zbar_v == other.within_zbar_v
            and self.within_zbar_a == other.within_zbar_a
            and np.array_equal(self.video_mem, other.video_mem)
            and np.array_equal(self.audio_mem, other.audio_mem)
        )


def _or_nan(value: Optional[float]) -> float:
    return math.nan if value is None else float(value)


def partition_estimate(probe: np.ndarray, memory: np.ndarray, tau: float) -> float:
    probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    if probe.shape[0] == 0:
        raise ContractError('partition estimate needs a non-empty probe batch')
    if probe.shape[1] != memory.shape[1]:
        raise ShapeError(f'probe {probe.shape} does not match memory {memory.shape}')
    return float(np.exp(probe @ memory.T / tau).mean())


def init_random(num_instances: int, embed_dim: int, seed, momentum: float = 0.5) -> MemoryBank:
    """Bank whose rows are independent uniform directions on the sphere."""
    if num_instances < 1:
        raise ContractError('memory bank needs at least one instance')
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    video = rng.standard_normal((num_instances, embed_dim))
    audio = rng.standard_normal((num_instances, embed_dim))
    return MemoryBank(video, audio, momentum)


def init_from(video_embeddings: np.ndarray, audio_embeddings: np.ndarray, momentum: float = 0.5) -> MemoryBank:
    """Bank seeded with given embeddings (renormalised)."""
    if len(video_embeddings) < 1:
        raise ContractError('memory bank needs at least one instance')
    return MemoryBank(np.array(video_embeddings, dtype=np.float64), np.array(audio_embeddings, dtype=np.float64), momentum)


def from_bytes(data: bytes, path: Optional[PathLike] = None) -> MemoryBank:
    r = Reader(data, MAGIC, versions=(VERSION,), path=path)
    count, dim = r.unpack('QI')
    momentum, zbar_v, zbar_a = r.unpack('ddd')
    if not 0.0 < momentum < 1.0:
        r.fail(f'momentum {momentum} outside (0, 1)', offset=r.offset - 24)
    within_v, within_a = r.unpack('dd')
    video = r.array('<f8', count * dim).reshape(count, dim)
    audio = r.array('<f8', count * dim).reshape(count, dim)
    r.finish()
    bank = MemoryBank.__new__(MemoryBank)
    bank.video_mem = video
    bank.audio_mem = audio
    bank.momentum = momentum
    bank.zbar_v = None if math.isnan(zbar_v) else zbar_v
    bank.zbar_a = None if math.isnan(zbar_a) else zbar_a
    bank.within_zbar_v = None if math.isnan(within_v) else within_v
    bank.within_zbar_a = None if math.isnan(within_a) else within_a
    bank._lock = threading.Lock()
    return bank


def save(bank: MemoryBank, path: PathLike):
    write_bytes_atomic(path, bank.to_bytes())


def load(path: PathLike) -> MemoryBank:
    return from_bytes(read_bytes(path), path=path)
