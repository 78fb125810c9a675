from typing import Optional

import pandas as pd

try:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
except Exception:  # pragma: no cover - optional dependency
    plt = None


def _require_matplotlib():
    if plt is None:
        raise RuntimeError('matplotlib is required for rendering figures. Install with pip install matplotlib')


def _finish(ax, savefile: Optional[str]):
    fig = ax.get_figure()
    fig.tight_layout()
    if savefile:
        fig.savefig(savefile)
    plt.close(fig)
    return fig


def plot_loss_curve(metrics: pd.DataFrame, title: Optional[str] = None, savefile: Optional[str] = None):
    """Per-epoch loss terms of a metrics stream, one line per ``loss_*`` column.

    Epochs are numbered across phases so a CMA run continues the AVID curve.
    """
    _require_matplotlib()
    cols = [c for c in metrics.columns if c.startswith('loss_')]
    if not cols:
        raise ValueError('metrics frame has no loss_* columns')
    frame = metrics[cols].copy()
    frame.index = pd.RangeIndex(len(frame), name='epoch')
    ax = frame.plot(figsize=(10, 6), title=title or 'training loss')
    if 'phase' in metrics.columns:
        # mark the AVID -> CMA switch
        switch = (metrics['phase'].values != metrics['phase'].values[0]).argmax()
        if switch:
            ax.axvline(switch, color='grey', linestyle='--')
    ax.set_ylabel('loss')
    return _finish(ax, savefile)


def plot_sweep(sweep: pd.DataFrame, title: Optional[str] = None, savefile: Optional[str] = None):
    """Probe accuracy against lambda, one line per feature source with std error bars."""
    _require_matplotlib()
    for c in ('lambda', 'feature_source', 'accuracy_mean', 'accuracy_std'):
        if c not in sweep.columns:
            raise ValueError(f'sweep frame must contain a {c} column')
    means = sweep.pivot(index='lambda', columns='feature_source', values='accuracy_mean')
    stds = sweep.pivot(index='lambda', columns='feature_source', values='accuracy_std')
    ax = means.plot(figsize=(8, 5), yerr=stds, marker='o', capsize=3, title=title or 'probe accuracy vs lambda')
    ax.set_xlabel('lambda')
    ax.set_ylabel('top-1 accuracy')
    return _finish(ax, savefile)


def plot_precision_curve(curve: pd.DataFrame, title: Optional[str] = None, savefile: Optional[str] = None):
    """Precision@K curves; ``curve`` is indexed by K with one column per mining method."""
    _require_matplotlib()
    ax = curve.plot(figsize=(8, 5), title=title or 'precision@K')
    ax.set_xlabel('K')
    ax.set_ylabel('precision')
    ax.set_ylim(0.0, 1.05)
    return _finish(ax, savefile)


def plot_norm_histogram(hist: pd.DataFrame, title: Optional[str] = None, savefile: Optional[str] = None):
    """Bar chart of a ``norm_histogram`` frame (columns lower, upper, count)."""
    _require_matplotlib()
    centers = (hist['lower'] + hist['upper']) / 2.0
    widths = hist['upper'] - hist['lower']
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.bar(centers, hist['count'], width=widths, align='center')
    ax.set_title(title or 'row norms')
    ax.set_xlabel('norm')
    ax.set_ylabel('rows')
    return _finish(ax, savefile)
