"""Dense float64 matrix arithmetic with a reverse-mode tape and an Adam optimizer.

Matrices are plain 2-D ``numpy.float64`` arrays. Operations accept either raw
arrays or ``Var`` handles; when any input is a ``Var`` the result is recorded on
that input's ``Tape`` and returned as a ``Var``, otherwise the plain array is
returned. The same code therefore serves traced training steps and untraced
evaluation.

    tape = Tape()
    w = tape.watch(weights)
    loss = mean(relu(matmul(x, w)))
    (grad_w,) = tape.backward(loss, [w])
"""
from dataclasses import dataclass, field, replace
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

Matrix = np.ndarray

NORM_EPS = 1e-8


class Var:
    """Handle to a node recorded on a ``Tape``."""

    __slots__ = ('tape', 'index', 'value')

    def __init__(self, tape: 'Tape', index: int, value: Matrix):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f'<Var #{self.index} shape={self.value.shape}>'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise ContractError('division by a traced value is not supported')
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they are evaluated, so every node's inputs precede
    it. ``backward`` walks the record in reverse and accumulates adjoints.
    """

    def __init__(self):
        self.values: List[Matrix] = []
        self._parents: List[tuple] = []
        self._vjps: List[Optional[Callable]] = []
        self.adjoints: List[Optional[Matrix]] = []

    def __len__(self):
        return len(self.values)

    def watch(self, value) -> Var:
        """Register ``value`` as a differentiable leaf (a parameter or an input)."""
        return self.record(np.array(value, dtype=np.float64), (), None)

    def record(self, value: Matrix, parents: tuple, vjp: Optional[Callable]) -> Var:
        self.values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, len(self.values) - 1, value)

    def backward(self, loss: Var, wrt: Optional[Sequence[Var]] = None) -> List[Matrix]:
        """Return d(loss)/d(node) for each node in ``wrt`` (all nodes when omitted)."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError('loss was not recorded on this tape')
        if loss.value.size != 1:
            raise ContractError(f'loss must be a 1x1 scalar, got shape {loss.value.shape}')

        adjoints: List[Optional[Matrix]] = [None] * len(self.values)
        adjoints[loss.index] = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            grad = adjoints[idx]
            parents = self._parents[idx]
            if grad is None or not parents:
                continue
            for parent, contribution in zip(parents, self._vjps[idx](grad)):
                if not isinstance(parent, Var) or contribution is None:
                    continue
                current = adjoints[parent.index]
                adjoints[parent.index] = contribution if current is None else current + contribution
        self.adjoints = adjoints

        if wrt is None:
            return [a if a is not None else np.zeros_like(v) for a, v in zip(adjoints, self.values)]
        out = []
        for var in wrt:
            if var.tape is not self:
                raise ContractError(f'{var!r} belongs to another tape')
            adj = adjoints[var.index]
            out.append(np.zeros_like(var.value) if adj is None else adj)
        return out


def backward(tape: Tape, loss: Var, wrt: Optional[Sequence[Var]] = None) -> List[Matrix]:
    return tape.backward(loss, wrt)


def value_of(x) -> Matrix:
    """Underlying array of a ``Var`` or array-like."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(inputs) -> Optional[Tape]:
    tape = None
    for item in inputs:
        if isinstance(item, Var):
            if tape is None:
                tape = item.tape
            elif item.tape is not tape:
                raise ContractError('inputs were recorded on different tapes')
    return tape


def _emit(value: Matrix, inputs: tuple, vjp: Callable):
    tape = _tape_of(inputs)
    if tape is None:
        return value
    return tape.record(value, inputs, vjp)


def _unbroadcast(grad: Matrix, shape) -> Matrix:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Matrix, b: Matrix, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'{op}: cannot broadcast shapes {a.shape} and {b.shape}') from None


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeError(f'matmul: shapes {va.shape} and {vb.shape} are not aligned')
    return _emit(va @ vb, (a, b), lambda g: (g @ vb.T, va.T @ g))


def add(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast(va, vb, 'add')
    return _emit(va + vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast(va, vb, 'sub')
    return _emit(va - vb, (a, b), lambda g: (_unbroadcast(g, va.shape), -_unbroadcast(g, vb.shape)))


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast(va, vb, 'mul')
    return _emit(va * vb, (a, b), lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def scale(a, factor: float):
    factor = float(factor)
    return _emit(value_of(a) * factor, (a,), lambda g: (g * factor,))


def relu(a):
    va = value_of(a)
    mask = va > 0
    return _emit(np.where(mask, va, 0.0), (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(value_of(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    va = value_of(a)
    return _emit(np.log(va), (a,), lambda g: (g / va,))


def sigmoid_value(x: Matrix) -> Matrix:
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    va = value_of(a)
    return _emit(np.logaddexp(0.0, va), (a,), lambda g: (g * sigmoid_value(va),))


def clamp_max(a, limit):
    """Elementwise min(a, limit); the gradient is cut where the clamp is active."""
    va = value_of(a)
    limit = np.asarray(limit, dtype=np.float64)
    keep = va < limit
    return _emit(np.where(keep, va, limit), (a,), lambda g: (g * keep,))


def sum(a, axis: Optional[int] = None):  # noqa: A001 - mirrors numpy naming
    """Sum to a 1x1 matrix (``axis=None``) or along ``axis`` keeping dims."""
    va = value_of(a)
    if axis is None:
        out = np.array([[va.sum()]])
    else:
        out = va.sum(axis=axis, keepdims=True)
    return _emit(out, (a,), lambda g: (np.broadcast_to(g, va.shape).copy(),))


def mean(a, axis: Optional[int] = None):
    va = value_of(a)
    count = va.size if axis is None else va.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def l2_normalize_rows(x, eps: float = NORM_EPS):
    """Divide each row by max(||row||, eps)."""
    vx = value_of(x)
    norms = np.sqrt((vx * vx).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = vx / denom
    live = norms > eps

    def vjp(g):
        radial = (g * out).sum(axis=1, keepdims=True)
        return (np.where(live, (g - out * radial) / denom, g / eps),)

    return _emit(out, (x,), vjp)


def similarities(x, targets):
    """Inner products of each row of ``x`` (B x d) with its own target rows (B x M x d).

    ``targets`` is treated as a constant; the result is B x M.
    """
    vx = value_of(x)
    vt = np.asarray(value_of(targets), dtype=np.float64)
    if vt.ndim != 3 or vt.shape[0] != vx.shape[0] or vt.shape[2] != vx.shape[1]:
        raise ShapeError(f'similarities: rows {vx.shape} and targets {vt.shape} are not aligned')
    out = np.einsum('bd,bmd->bm', vx, vt)
    return _emit(out, (x,), lambda g: (np.einsum('bm,bmd->bd', g, vt),))


def softmax_cross_entropy(logits, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    vz = value_of(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (vz.shape[0],):
        raise ShapeError(f'softmax_cross_entropy: logits {vz.shape} and labels {labels.shape}')
    shifted = vz - vz.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(vz.shape[0])
    out = np.array([[-log_probs[rows, labels].mean()]])

    def vjp(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (g[0, 0] / vz.shape[0]),)

    return _emit(out, (logits,), vjp)


@dataclass
class AdamState:
    """Per-parameter moment estimates plus hyper-parameters.

    ``weight_decay`` is coupled: ``wd * param`` is added to the gradient before
    the moment updates (plain L2 regularisation).
    """

    first_moment: List[Matrix]
    second_moment: List[Matrix]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Matrix], **hyper) -> 'AdamState':
        return cls(
            first_moment=[np.zeros_like(p, dtype=np.float64) for p in params],
            second_moment=[np.zeros_like(p, dtype=np.float64) for p in params],
            **hyper,
        )

    def hyperparameters(self) -> dict:
        return {
            'step': self.step,
            'learning_rate': self.learning_rate,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'epsilon': self.epsilon,
            'weight_decay': self.weight_decay,
        }


def adam_step(state: AdamState, params: Sequence[Matrix], grads: Sequence[Matrix]) -> Tuple[List[Matrix], AdamState]:
    """One bias-corrected Adam update. Returns fresh parameter arrays and a new state."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError(
            f'adam_step: {len(params)} params, {len(grads)} grads, {len(state.first_moment)} moments'
        )
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f'adam_step: param {p.shape}, grad {g.shape}, moment {m.shape}')
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        new_params.append(p - state.learning_rate * update)
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, first_moment=new_m, second_moment=new_v, step=step)


@dataclass
class GradientCheck:
    analytic: List[Matrix]
    numeric: List[Matrix]
    relative_error: float = field(default=0.0)


def check_gradients(loss_fn: Callable, params: Sequence[Matrix], step: float = 1e-5) -> GradientCheck:
    """Compare tape gradients of ``loss_fn(*params)`` against central differences.

    ``loss_fn`` must build its loss from the given arguments using this
    module's operations, so it can be evaluated both traced and untraced.
    The reported error is ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    watched = [tape.watch(p) for p in params]
    analytic = tape.backward(loss_fn(*watched), watched)

    def evaluate(values):
        return float(np.asarray(value_of(loss_fn(*values))).reshape(-1)[0])

    numeric = []
    for which, p in enumerate(params):
        grad = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            shifted = [q.copy() for q in params]
            shifted[which][idx] = p[idx] + step
            upper = evaluate(shifted)
            shifted[which][idx] = p[idx] - step
            lower = evaluate(shifted)
            grad[idx] = (upper - lower) / (2.0 * step)
        numeric.append(grad)

    flat_a = np.concatenate([a.ravel() for a in analytic])
    flat_n = np.concatenate([n.ravel() for n in numeric])
    scale_ = max(np.linalg.norm(flat_a), np.linalg.norm(flat_n), 1e-300)
    error = float(np.linalg.norm(flat_a - flat_n) / scale_)
    logger.debug('gradient check over %d entries: relative error %.3e', flat_a.size, error)
    return GradientCheck(analytic=analytic, numeric=numeric, relative_error=error)
