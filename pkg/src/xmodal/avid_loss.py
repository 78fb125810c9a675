"""Instance-discrimination losses: generalized softmax, NCE, and the AVID variants.

An embedding x is scored against a memory target row by
P(i|x) = exp(x.target / tau) / (N * zbar). NCE treats the target as data and
K uniformly drawn memories as noise with prior K/N, so

    P(D=1 | x, row) = P(i|x) / (P(i|x) + K/N) = sigmoid(x.row / tau - log(K * zbar))

and the loss is -log P(D=1|target) - sum_j log(1 - P(D=1|negative_j)), computed
with softplus in log space.
"""
from dataclasses import dataclass, field
import logging
import math
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

# 1 - P(D=1) is floored at this value before the log.
NOISE_FLOOR = 1e-12
_MAX_NOISE_TERM = -math.log(NOISE_FLOOR)


@dataclass(frozen=True)
class NceContext:
    tau: float
    zbar: float
    n: int
    k: int

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f'temperature must be > 0, got {self.tau}')
        if not self.zbar > 0:
            raise ContractError(f'partition constant must be > 0, got {self.zbar}')
        if self.k < 1:
            raise ContractError(f'need K >= 1 negatives, got {self.k}')
        if self.n < 2:
            raise ContractError(f'need N >= 2 instances, got {self.n}')

    @property
    def logit_shift(self) -> float:
        return math.log(self.k * self.zbar)


@dataclass
class LossBreakdown:
    """Weighted sum of named loss terms.

    ``total`` is traced (a ``Var``) when the terms were; ``terms`` holds the
    unweighted per-term values as floats.
    """

    total: object
    terms: Dict[str, float]
    weights: Dict[str, float]
    parts: Dict[str, object] = field(default_factory=dict, repr=False)

    @property
    def value(self) -> float:
        return float(nx.value_of(self.total).reshape(-1)[0])

    def record(self) -> Dict[str, float]:
        out = {'loss_total': self.value}
        out.update({f'loss_{name}': value for name, value in self.terms.items()})
        return out


def combine(parts: Mapping[str, object], weights: Optional[Mapping[str, float]] = None) -> LossBreakdown:
    weights = {name: 1.0 if weights is None else float(weights.get(name, 1.0)) for name in parts}
    total = None
    for name, part in parts.items():
        term = part if weights[name] == 1.0 else nx.scale(part, weights[name])
        total = term if total is None else nx.add(total, term)
    terms = {name: float(nx.value_of(part).reshape(-1)[0]) for name, part in parts.items()}
    return LossBreakdown(total, terms, weights, dict(parts))


def instance_prob(x, target, ctx: NceContext) -> float:
    """Generalized softmax P(i|x) with the frozen partition constant."""
    sim = float(np.dot(np.ravel(x), np.ravel(target)))
    return math.exp(sim / ctx.tau) / (ctx.n * ctx.zbar)


def nce_terms(x, positives: np.ndarray, negatives: np.ndarray, ctx: NceContext):
    """Batch-mean NCE of ``x`` (B x d) against P positives and K negatives per row.

    ``positives`` is B x P x d and ``negatives`` B x K x d. Each row's loss
    averages the data term over its P positives and sums the noise terms once,
    which equals the mean over positives of the single-positive NCE loss.
    """
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if positives.ndim != 3 or negatives.ndim != 3:
        raise ShapeError(f'positives {positives.shape} and negatives {negatives.shape} must be B x M x d')
    n_pos, n_neg = positives.shape[1], negatives.shape[1]
    if n_neg != ctx.k:
        raise ContractError(f'{n_neg} negatives supplied but context expects K={ctx.k}')
    if n_pos < 1:
        raise ContractError('need at least one positive')

    logits = nx.similarities(x, np.concatenate([positives, negatives], axis=1))
    shifted = nx.add(nx.scale(logits, 1.0 / ctx.tau), -ctx.logit_shift)
    signs = np.concatenate([-np.ones(n_pos), np.ones(n_neg)])[None, :]
    per_term = nx.softplus(nx.mul(shifted, signs))
    limits = np.concatenate([np.full(n_pos, np.inf), np.full(n_neg, _MAX_NOISE_TERM)])
    per_term = nx.clamp_max(per_term, limits)
    weights = np.concatenate([np.full(n_pos, 1.0 / n_pos), np.ones(n_neg)])[None, :]
    per_instance = nx.sum(nx.mul(per_term, weights), axis=1)
    return nx.mean(per_instance)


def nce_loss(x, target, negatives, ctx: NceContext):
    """NCE loss of embedding(s) ``x`` with one memory target each.

    Accepts a single instance (``x`` and ``target`` of shape (d,), ``negatives``
    K x d) or a batch (B x d, B x d, B x K x d); returns a 1x1 batch mean.
    """
    xv = nx.value_of(x)
    target = np.asarray(target, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if xv.ndim == 1:
        x = _as_row(x) if isinstance(x, nx.Var) else xv[None, :]
        target = target[None, :]
        negatives = negatives[None, :, :]
    return nce_terms(x, target[:, None, :], negatives, ctx)


def _as_row(x: nx.Var) -> nx.Var:
    # reshape a traced vector into a 1 x d row
    shape = x.value.shape
    return x.tape.record(x.value.reshape(1, -1), (x,), lambda g: (g.reshape(shape),))


def _context(bank, modality: str, tau: float, k: int) -> NceContext:
    return NceContext(tau=tau, zbar=bank.zbar(modality), n=len(bank), k=k)


def _term(x, bank, target_modality: str, ids, negatives, tau):
    memory = bank.memory(target_modality)
    ctx = _context(bank, target_modality, tau, negatives.shape[1])
    return nce_terms(x, memory[ids][:, None, :], memory[negatives], ctx)


def _check_batch(v, a, bank, ids, negatives):
    ids = np.asarray(ids, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    for arr in (ids, negatives):
        if arr.size and (arr.min() < 0 or arr.max() >= len(bank)):
            raise ContractError(f'instance id out of range [0, {len(bank)})')
    if negatives.ndim != 2 or negatives.shape[0] != len(ids):
        raise ShapeError(f'negatives must be ({len(ids)}, K), got {negatives.shape}')
    for name, emb in (('video', v), ('audio', a)):
        if nx.value_of(emb).shape != (len(ids), bank.embed_dim):
            raise ShapeError(f'{name} embeddings {nx.value_of(emb).shape} do not match ({len(ids)}, {bank.embed_dim})')
    return ids, negatives


def self_avid_parts(v, a, bank, ids, negatives, tau: float) -> Dict[str, object]:
    ids, negatives = _check_batch(v, a, bank, ids, negatives)
    return {
        'self_v': _term(v, bank, 'video', ids, negatives, tau),
        'self_a': _term(a, bank, 'audio', ids, negatives, tau),
    }


def cross_avid_parts(v, a, bank, ids, negatives, tau: float) -> Dict[str, object]:
    ids, negatives = _check_batch(v, a, bank, ids, negatives)
    return {
        'cross_v2a': _term(v, bank, 'audio', ids, negatives, tau),
        'cross_a2v': _term(a, bank, 'video', ids, negatives, tau),
    }


def self_avid(v, a, bank, ids: Sequence[int], negatives, tau: float) -> LossBreakdown:
    """Within-modal discrimination: v against video memories, a against audio memories."""
    return combine(self_avid_parts(v, a, bank, ids, negatives, tau))


def cross_avid(v, a, bank, ids: Sequence[int], negatives, tau: float) -> LossBreakdown:
    """Cross-modal discrimination: v against audio memories, a against video memories."""
    return combine(cross_avid_parts(v, a, bank, ids, negatives, tau))


def joint_avid(v, a, bank, ids: Sequence[int], negatives, tau: float) -> LossBreakdown:
    parts = self_avid_parts(v, a, bank, ids, negatives, tau)
    parts.update(cross_avid_parts(v, a, bank, ids, negatives, tau))
    return combine(parts)


OBJECTIVES = {
    'self': self_avid,
    'cross': cross_avid,
    'joint': joint_avid,
}


def zbar_probes(variant: str, v: np.ndarray, a: np.ndarray):
    """Embeddings that each memory is contrasted against under ``variant``.

    Returns (probe for video memory, probe for audio memory).
    """
    if variant == 'self':
        return v, a
    if variant == 'cross':
        return a, v
    if variant == 'joint':
        return np.vstack([v, a]), np.vstack([a, v])
    raise ValueError(f'unknown variant {variant!r}')
