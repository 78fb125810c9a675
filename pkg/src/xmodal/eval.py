"""Label-aware evaluation of frozen representations.

Nothing here feeds back into training: probes read features extracted from
encoders or memory rows and train only their own linear classifier.
"""
from dataclasses import dataclass, field
import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import numerics as nx
from .errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

FEATURE_SOURCES = ('video_enc', 'audio_enc', 'video_trunk', 'audio_trunk', 'video_mem', 'audio_mem', 'concat_mem')
MEMORY_SOURCES = ('video_mem', 'audio_mem', 'concat_mem')

PROBE_EPOCHS = 500
PROBE_LR = 0.05


@dataclass
class ProbeResult:
    top1_accuracy: float
    per_class_accuracy: np.ndarray
    feature_source: str
    split_seed: int
    accuracy_std: float = 0.0
    split_accuracies: List[float] = field(default_factory=list)

    def record(self) -> dict:
        return {
            'feature_source': self.feature_source,
            'accuracy_mean': self.top1_accuracy,
            'accuracy_std': self.accuracy_std,
            'split_seed': self.split_seed,
            'split_accuracies': list(self.split_accuracies),
            'per_class_accuracy': [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
        }


def _split(n: int, split_ratio: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split_ratio * n))
    if not 0 < n_train < n:
        raise ConfigError(f'split ratio {split_ratio} leaves an empty side for {n} samples', 'split_ratio')
    return perm[:n_train], perm[n_train:]


def _fit_softmax(features: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int, lr: float):
    weight = np.zeros((features.shape[1], num_classes))
    bias = np.zeros((1, num_classes))
    state = nx.AdamState.for_params([weight, bias], learning_rate=lr)
    for _ in range(epochs):
        tape = nx.Tape()
        w, b = tape.watch(weight), tape.watch(bias)
        loss = nx.softmax_cross_entropy(nx.add(nx.matmul(features, w), b), labels)
        grads = tape.backward(loss, [w, b])
        (weight, bias), state = nx.adam_step(state, [weight, bias], grads)
    return weight, bias


def linear_probe(features, labels, split_ratio: float = 0.7, seed: int = 0, repeats: int = 1,
                 epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR, feature_source: str = 'features') -> ProbeResult:
    """Multinomial logistic regression on frozen features, scored on held-out rows.

    With ``repeats > 1`` the split is redrawn with seeds ``seed, seed+1, ...``
    and accuracies are averaged. Features are standardised with train-split
    statistics.
    """
    features = np.array(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise ContractError(f'features {features.shape} and labels {labels.shape} disagree')
    num_classes = int(labels.max()) + 1
    accuracies = []
    per_class = []
    for r in range(repeats):
        train, val = _split(len(labels), split_ratio, seed + r)
        if len(np.unique(labels[train])) < 2:
            raise ConfigError('training split holds a single class', 'labels')
        mu = features[train].mean(axis=0)
        sd = features[train].std(axis=0)
        sd[sd < 1e-12] = 1.0
        x_train = (features[train] - mu) / sd
        x_val = (features[val] - mu) / sd
        weight, bias = _fit_softmax(x_train, labels[train], num_classes, epochs, lr)
        predicted = np.argmax(x_val @ weight + bias, axis=1)
        correct = predicted == labels[val]
        accuracies.append(float(correct.mean()))
        per_class.append([
            float(correct[labels[val] == c].mean()) if np.any(labels[val] == c) else np.nan
            for c in range(num_classes)
        ])
    per_class = np.array(per_class)
    with np.errstate(all='ignore'):
        class_means = np.array([
            np.nan if np.all(np.isnan(col)) else float(np.nanmean(col)) for col in per_class.T
        ])
    result = ProbeResult(
        top1_accuracy=float(np.mean(accuracies)),
        per_class_accuracy=class_means,
        feature_source=feature_source,
        split_seed=seed,
        accuracy_std=float(np.std(accuracies)),
        split_accuracies=accuracies,
    )
    logger.info('probe %s: top-1 %.4f +- %.4f over %d split(s)', feature_source,
                result.top1_accuracy, result.accuracy_std, repeats)
    return result


def collapse_diagnostic(rows, method: str = 'identity') -> float:
    """Mean inner product over all pairs i < j of ``rows``.

    ``method='exact'`` sums the pairwise products directly; ``'identity'``
    uses ||sum rows||^2 = sum ||row||^2 + 2 * sum_{i<j} row_i.row_j.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if n < 2:
        raise ContractError(f'collapse diagnostic needs at least 2 rows, got {n}')
    pairs = n * (n - 1) / 2.0
    if method == 'exact':
        gram = rows @ rows.T
        return float(np.triu(gram, k=1).sum() / pairs)
    if method == 'identity':
        total = rows.sum(axis=0)
        squared_norms = np.einsum('ij,ij->', rows, rows)
        return float((total @ total - squared_norms) / 2.0 / pairs)
    raise ValueError(f'unknown method {method!r}')


def norm_histogram(rows, bins: int = 20) -> pd.DataFrame:
    norms = np.linalg.norm(np.asarray(rows, dtype=np.float64), axis=1)
    lo, hi = float(norms.min()), float(norms.max())
    if hi - lo < 1e-9:
        lo, hi = lo - 1e-9, hi + 1e-9
    counts, edges = np.histogram(norms, bins=bins, range=(lo, hi))
    return pd.DataFrame({'lower': edges[:-1], 'upper': edges[1:], 'count': counts})


def extract_features(dataset, source: str, video_encoder=None, audio_encoder=None, bank=None) -> np.ndarray:
    """Frozen features of every instance for one feature source.

    Encoder sources embed the noise-free anchors; memory sources read bank rows.
    """
    if source in ('video_enc', 'video_trunk', 'audio_enc', 'audio_trunk'):
        model = video_encoder if source.startswith('video') else audio_encoder
        if model is None:
            raise ContractError(f'{source} needs an encoder')
        anchors = dataset.anchors_a if source.startswith('video') else dataset.anchors_b
        out = model.forward(anchors)
        return np.array(nx.value_of(out.embeddings if source.endswith('_enc') else out.trunk))
    if source in MEMORY_SOURCES:
        if bank is None:
            raise ContractError(f'{source} needs a memory bank')
        if len(bank) != len(dataset):
            raise ContractError(f'bank has {len(bank)} rows for {len(dataset)} instances')
        if source == 'video_mem':
            return bank.video_mem.copy()
        if source == 'audio_mem':
            return bank.audio_mem.copy()
        return np.hstack([bank.video_mem, bank.audio_mem])
    raise ConfigError(f'unknown feature source {source!r}', 'feature_source')


def probe_sources(dataset, sources: Iterable[str], video_encoder=None, audio_encoder=None, bank=None,
                  repeats: int = 5, seed: int = 0, epochs: int = PROBE_EPOCHS) -> Dict[str, ProbeResult]:
    results = {}
    for source in sources:
        feats = extract_features(dataset, source, video_encoder, audio_encoder, bank)
        results[source] = linear_probe(feats, dataset.labels, seed=seed, repeats=repeats, epochs=epochs,
                                       feature_source=source)
    return results


def probe_state(state, dataset, sources: Sequence[str] = FEATURE_SOURCES, repeats: int = 5, seed: int = 0,
                epochs: int = PROBE_EPOCHS) -> Dict[str, ProbeResult]:
    """Probe every requested source of a run state (encoders and memory bank)."""
    return probe_sources(dataset, sources, state.video_encoder, state.audio_encoder, state.bank,
                         repeats=repeats, seed=seed, epochs=epochs)


@dataclass
class VariantReport:
    means: pd.DataFrame
    stds: pd.DataFrame

    def to_dict(self) -> dict:
        out = {}
        for variant in self.means.index:
            for source in self.means.columns:
                out[f'{variant}/{source}'] = {
                    'mean': float(self.means.loc[variant, source]),
                    'std': float(self.stds.loc[variant, source]),
                }
        return out

    def long_form(self) -> pd.DataFrame:
        means = self.means.stack().rename('accuracy_mean')
        stds = self.stds.stack().rename('accuracy_std')
        frame = pd.concat([means, stds], axis=1).reset_index()
        frame.columns = ['variant', 'feature_source', 'accuracy_mean', 'accuracy_std']
        return frame


def variant_report(states: Mapping[str, object], dataset, sources: Sequence[str] = FEATURE_SOURCES,
                   repeats: int = 5, seed: int = 0, epochs: int = PROBE_EPOCHS) -> VariantReport:
    """Probe accuracy per variant (rows) and feature source (columns)."""
    digest = dataset.digest()
    for name, state in states.items():
        if state.dataset_digest != digest:
            raise ContractError(f'run {name!r} was trained on a different dataset')
    means = pd.DataFrame(index=list(states), columns=list(sources), dtype=float)
    stds = pd.DataFrame(index=list(states), columns=list(sources), dtype=float)
    for name, state in states.items():
        for source, result in probe_state(state, dataset, sources, repeats, seed, epochs).items():
            means.loc[name, source] = result.top1_accuracy
            stds.loc[name, source] = result.accuracy_std
    return VariantReport(means, stds)
