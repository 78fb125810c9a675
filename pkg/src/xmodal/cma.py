"""Cross-modal agreement: positive-set mining and the agreement-aware losses.

Two instances agree when they are close in *both* memories; the agreement
score is rho_ij = min(v_i.v_j, a_i.a_j) over memory rows. Each instance's
positive set is its top-K_pool partners by score (self excluded). The
within-modality expansion baselines rank by one modality only, or take half
from each.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
import time
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from . import avid_loss
from .errors import ConfigError, ContractError
from .formats import PathLike, Reader, Writer, read_bytes, write_bytes_atomic
from .membank import MemoryBank

logger = logging.getLogger(__name__)

MAGIC = b'XMAG'
VERSION = 1

METHODS = ('cma', 'video_only', 'audio_only', 'union')


@dataclass(frozen=True)
class CmaConfig:
    k_pool: int = 32
    k_p: int = 32
    k_n: int = 1024
    lam: float = 1.0
    refresh_period: int = 50
    epochs: int = 200

    def validate(self, num_instances: Optional[int] = None):
        if self.k_pool < 1:
            raise ConfigError('must be >= 1', 'cma.k_pool')
        if not 1 <= self.k_p <= self.k_pool:
            raise ConfigError(f'must lie in [1, k_pool={self.k_pool}]', 'cma.k_p')
        if self.k_n < 1:
            raise ConfigError('must be >= 1', 'cma.k_n')
        if self.lam < 0:
            raise ConfigError('must be >= 0', 'cma.lambda')
        if self.refresh_period < 1:
            raise ConfigError('must be >= 1', 'cma.refresh_period')
        if self.epochs < 1:
            raise ConfigError('must be >= 1', 'cma.epochs')
        if num_instances is not None and self.k_pool >= num_instances - 1:
            raise ConfigError(f'k_pool={self.k_pool} leaves no negatives among N={num_instances}', 'cma.k_pool')


@dataclass(eq=False)
class AgreementSets:
    """Mined positive sets: row i lists K_pool ids by descending score."""

    positives: np.ndarray
    scores: np.ndarray
    mined_epoch: int
    method: str

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.method not in METHODS:
            raise ConfigError(f'unknown mining method {self.method!r}', 'method')
        if self.positives.shape != self.scores.shape or self.positives.ndim != 2:
            raise ContractError(f'positives {self.positives.shape} and scores {self.scores.shape} disagree')

    def __len__(self):
        return self.positives.shape[0]

    @property
    def k_pool(self) -> int:
        return self.positives.shape[1]

    def __eq__(self, other):
        if not isinstance(other, AgreementSets):
            return NotImplemented
        return (
            self.method == other.method
            and self.mined_epoch == other.mined_epoch
            and np.array_equal(self.positives, other.positives)
            and np.array_equal(self.scores, other.scores)
        )

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        w.pack('QIIq', len(self), self.k_pool, METHODS.index(self.method), self.mined_epoch)
        record = _row_dtype(self.k_pool)
        rows = np.zeros(len(self), dtype=record)
        rows['ids'] = self.positives
        rows['scores'] = self.scores
        w.array(rows, record)
        return w.getvalue()


def _row_dtype(k_pool: int) -> np.dtype:
    return np.dtype([('ids', '<u8', (k_pool,)), ('scores', '<f8', (k_pool,))])


def agreement_score(bank: MemoryBank, i: int, j: int) -> float:
    n = len(bank)
    for idx in (i, j):
        if not 0 <= idx < n:
            raise IndexError(f'instance id {idx} out of range [0, {n})')
    video = float(np.dot(bank.video_mem[i], bank.video_mem[j]))
    audio = float(np.dot(bank.audio_mem[i], bank.audio_mem[j]))
    return min(video, audio)


def _ranked(row_scores: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending id (stable sort on the negated scores)
    return np.argsort(-row_scores, kind='stable')


def _union_row(i: int, sim_v: np.ndarray, sim_a: np.ndarray, k_pool: int):
    order_v = _ranked(sim_v)
    order_a = _ranked(sim_a)
    order_v = order_v[order_v != i]
    order_a = order_a[order_a != i]
    half_v = (k_pool + 1) // 2
    half_a = k_pool // 2
    chosen = dict.fromkeys(order_v[:half_v].tolist())
    chosen.update(dict.fromkeys(order_a[:half_a].tolist()))
    cursors = {'v': half_v, 'a': half_a}
    lists = {'v': order_v, 'a': order_a}
    turn = 'v'
    while len(chosen) < k_pool:
        ranked = lists[turn]
        while cursors[turn] < len(ranked) and int(ranked[cursors[turn]]) in chosen:
            cursors[turn] += 1
        if cursors[turn] < len(ranked):
            chosen[int(ranked[cursors[turn]])] = None
            cursors[turn] += 1
        turn = 'a' if turn == 'v' else 'v'
    ids = np.fromiter(chosen, dtype=np.int64, count=len(chosen))
    scores = np.maximum(sim_v[ids], sim_a[ids])
    order = np.lexsort((ids, -scores))
    return ids[order], scores[order]


def mine(bank: MemoryBank, k_pool: int, method: str = 'cma', epoch: int = 0, threads: int = 1) -> AgreementSets:
    """Top-``k_pool`` partners of every instance by the method's score.

    Scores use memory rows. Row selection is split across ``threads`` workers;
    similarities are computed once up front so results do not depend on the
    thread count.
    """
    if method not in METHODS:
        raise ConfigError(f'unknown mining method {method!r}; choose from {", ".join(METHODS)}', 'method')
    n = len(bank)
    if k_pool < 1 or k_pool >= n:
        raise ConfigError(f'k_pool={k_pool} must lie in [1, N={n})', 'k_pool')
    started = time.perf_counter()
    sim_v = bank.video_mem @ bank.video_mem.T
    sim_a = bank.audio_mem @ bank.audio_mem.T
    if method == 'cma':
        score = np.minimum(sim_v, sim_a)
    elif method == 'video_only':
        score = sim_v
    elif method == 'audio_only':
        score = sim_a
    else:
        score = None

    positives = np.zeros((n, k_pool), dtype=np.int64)
    scores = np.zeros((n, k_pool), dtype=np.float64)

    def fill(rows: Iterable[int]):
        for i in rows:
            if score is None:
                positives[i], scores[i] = _union_row(i, sim_v[i], sim_a[i], k_pool)
                continue
            row = score[i].copy()
            row[i] = -np.inf
            top = _ranked(row)[:k_pool]
            positives[i] = top
            scores[i] = score[i, top]

    threads = max(1, int(threads))
    if threads == 1:
        fill(range(n))
    else:
        chunks = np.array_split(np.arange(n), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, chunks))
    logger.info('mined %s positives: N=%d K_pool=%d epoch=%d in %.2fs',
                method, n, k_pool, epoch, time.perf_counter() - started)
    return AgreementSets(positives, scores, int(epoch), method)


def precision_at_k(sets: AgreementSets, labels: Sequence[int], ks: Optional[Iterable[int]] = None) -> Dict[int, float]:
    """Mean fraction of each instance's top-K positives that share its label, per K.

    ``ks`` defaults to every K in 1..K_pool.
    """
    labels = np.asarray(labels)
    if len(labels) != len(sets):
        raise ContractError(f'{len(labels)} labels for {len(sets)} instances')
    ks = list(range(1, sets.k_pool + 1)) if ks is None else [int(k) for k in ks]
    for k in ks:
        if not 1 <= k <= sets.k_pool:
            raise ConfigError(f'K={k} outside [1, {sets.k_pool}]', 'k')
    hits = labels[sets.positives] == labels[:, None]
    cumulative = np.cumsum(hits, axis=1)
    return {k: float((cumulative[:, k - 1] / k).mean()) for k in ks}


def refresh_schedule(epoch: int, config: CmaConfig) -> bool:
    """Whether positives are re-mined at the start of CMA epoch ``epoch``."""
    return epoch % config.refresh_period == 0


def sample_positives(sets: AgreementSets, ids: Sequence[int], k_p: int, rng: np.random.Generator) -> np.ndarray:
    """K_p ids per instance, drawn without replacement from its mined set."""
    rows = sets.positives[np.asarray(ids, dtype=np.int64)]
    if k_p == sets.k_pool:
        return rows.copy()
    if k_p > sets.k_pool:
        raise ConfigError(f'k_p={k_p} exceeds k_pool={sets.k_pool}', 'cma.k_p')
    return np.stack([rng.choice(row, size=k_p, replace=False) for row in rows])


def sample_negatives(bank: MemoryBank, sets: AgreementSets, ids: Sequence[int], k_n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform negatives that avoid the instance and its whole positive set."""
    return bank.sample_negatives_batch(ids, k_n, rng, exclude=[sets.positives[int(i)] for i in ids])


def _check_disjoint(sets: AgreementSets, ids, sampled, negatives):
    for row, i in enumerate(ids):
        mined = sets.positives[int(i)]
        if not np.isin(sampled[row], mined).all():
            raise ContractError(f'sampled positives of instance {i} are not in its mined set')
        banned = np.append(mined, int(i))
        clash = np.intersect1d(negatives[row], banned)
        if clash.size:
            raise ContractError(f'negatives of instance {i} overlap its positives: {clash.tolist()}')


def wmpd_parts(v, a, bank: MemoryBank, sets: AgreementSets, ids, sampled_positives, negatives, tau: float):
    ids = np.asarray(ids, dtype=np.int64)
    sampled = np.asarray(sampled_positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if sampled.ndim != 2 or sampled.shape[0] != len(ids):
        raise ContractError(f'sampled positives must be ({len(ids)}, K_p), got {sampled.shape}')
    _check_disjoint(sets, ids, sampled, negatives)
    parts = {}
    for name, x, modality in (('wmpd_v', v, 'video'), ('wmpd_a', a, 'audio')):
        memory = bank.memory(modality)
        ctx = avid_loss.NceContext(tau=tau, zbar=bank.within_zbar(modality), n=len(bank), k=negatives.shape[1])
        parts[name] = avid_loss.nce_terms(x, memory[sampled], memory[negatives], ctx)
    return parts


def wmpd_loss(v, a, bank: MemoryBank, sets: AgreementSets, ids, sampled_positives, negatives, tau: float):
    """Within-modality positive discrimination averaged over the sampled positives.

    Scores use the bank's within-modality partition constants.
    """
    return avid_loss.combine(wmpd_parts(v, a, bank, sets, ids, sampled_positives, negatives, tau))


def cma_loss(v, a, bank: MemoryBank, sets: AgreementSets, ids, sampled_positives, negatives,
             config: CmaConfig, tau: float):
    """Cross-AVID plus lambda times wMPD, both on the same agreement-aware negatives."""
    parts = avid_loss.cross_avid_parts(v, a, bank, ids, negatives, tau)
    parts.update(wmpd_parts(v, a, bank, sets, ids, sampled_positives, negatives, tau))
    return avid_loss.combine(parts, {'wmpd_v': config.lam, 'wmpd_a': config.lam})


def from_bytes(data: bytes, path: Optional[PathLike] = None) -> AgreementSets:
    r = Reader(data, MAGIC, path=path)
    count, k_pool, tag, mined_epoch = r.unpack('QIIq')
    if tag >= len(METHODS):
        r.fail(f'unknown method tag {tag}', offset=r.offset - 12)
    record = _row_dtype(k_pool)
    body = r.offset
    rows = r.array(record, count)
    r.finish()
    raw = rows['ids']
    if raw.size and raw.max() >= count:
        bad = int(np.argmax((raw >= count).any(axis=1)))
        r.fail(f'positive id {raw.max()} >= N={count} in row {bad}', offset=body + bad * record.itemsize)
    return AgreementSets(raw.astype(np.int64), rows['scores'].astype(np.float64), int(mined_epoch), METHODS[tag])


def save(sets: AgreementSets, path: PathLike):
    write_bytes_atomic(path, sets.to_bytes())


def load(path: PathLike) -> AgreementSets:
    return from_bytes(read_bytes(path), path=path)
