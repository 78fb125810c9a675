"""MLP encoders mapping one modality's raw views to unit-norm embeddings.

An encoder is a trunk (``hidden_dims``) followed by a projection head
(``head_dims``); every layer but the last is followed by a rectifier and the
output is L2-normalised. Encoders are immutable values: training produces new
encoders through ``with_parameters``.
"""
from dataclasses import dataclass, field
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .formats import PathLike, Reader, Writer, read_bytes, write_bytes_atomic

logger = logging.getLogger(__name__)

MAGIC = b'XMCK'
VERSION = 1

# fixed shift along the all-ones direction, added before normalisation
OUTPUT_OFFSET = 1e-2


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: Tuple[int, ...] = (512, 512)
    head_dims: Tuple[int, ...] = (512, 512, 128)
    activation: str = 'relu'

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, 'head_dims', tuple(int(d) for d in self.head_dims))

    @property
    def embed_dim(self) -> int:
        return self.head_dims[-1]

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_dims, *self.head_dims]

    def validate(self):
        if self.activation != 'relu':
            raise ConfigError(f'unsupported activation {self.activation!r}', 'activation')
        if not self.head_dims:
            raise ConfigError('need at least one head layer', 'head_dims')
        if any(d < 1 for d in self.layer_dims):
            raise ConfigError(f'all dims must be positive, got {self.layer_dims}', 'hidden_dims')
        if self.embed_dim < 2:
            raise ConfigError('embedding must have at least 2 dims', 'head_dims')


@dataclass
class EmbeddingBatch:
    """Encoder output for one minibatch.

    ``embeddings`` are the unit-norm rows, ``trunk`` the pre-head features.
    When produced on a tape both are ``Var`` handles and ``params`` holds the
    watched parameters in ``Encoder.parameters()`` order.
    """

    embeddings: object
    trunk: object
    params: List[nx.Var] = field(default_factory=list)

    @property
    def value(self) -> np.ndarray:
        return nx.value_of(self.embeddings)


class Encoder:
    def __init__(self, config: EncoderConfig, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        dims = config.layer_dims
        if len(weights) != len(dims) - 1 or len(biases) != len(weights):
            raise ShapeError(f'expected {len(dims) - 1} layers, got {len(weights)} weights / {len(biases)} biases')
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[k], dims[k + 1]) or b.shape != (1, dims[k + 1]):
                raise ShapeError(f'layer {k}: weight {w.shape}, bias {b.shape}, expected ({dims[k]}, {dims[k + 1]})')
        self.config = config
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def trunk_layers(self) -> int:
        return len(self.config.hidden_dims)

    def parameters(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> 'Encoder':
        params = list(params)
        return Encoder(self.config, params[0::2], params[1::2])

    def forward(self, batch, tape: Optional[nx.Tape] = None) -> EmbeddingBatch:
        """Embed ``batch`` (rows are views). With a tape, the pass is traced."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.config.input_dim:
            raise ShapeError(f'encoder expects (n, {self.config.input_dim}) input, got {batch.shape}')
        params = [tape.watch(p) for p in self.parameters()] if tape is not None else self.parameters()
        embeddings, trunk = apply(params, batch, self.trunk_layers)
        return EmbeddingBatch(embeddings, trunk, params if tape is not None else [])

    def embed(self, batch) -> np.ndarray:
        return self.forward(batch).value

    def trunk_features(self, batch) -> np.ndarray:
        return nx.value_of(self.forward(batch).trunk)

    def to_bytes(self) -> bytes:
        w = Writer(MAGIC, VERSION)
        cfg = self.config
        w.pack('II', cfg.input_dim, len(cfg.hidden_dims))
        w.pack(f'{len(cfg.hidden_dims)}I', *cfg.hidden_dims)
        w.pack('I', len(cfg.head_dims))
        w.pack(f'{len(cfg.head_dims)}I', *cfg.head_dims)
        for weight, bias in zip(self.weights, self.biases):
            w.matrix(weight)
            w.matrix(bias)
        return w.getvalue()

    def __eq__(self, other):
        if not isinstance(other, Encoder):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters())
        )


def apply(params: Sequence, batch, trunk_layers: int):
    """Forward pass over flat ``[W0, b0, W1, b1, ...]`` (arrays or ``Var``s).

    ReLU follows every layer but the last. Returns (unit-norm embeddings, trunk),
    where trunk is the output of layer ``trunk_layers - 1`` (the input if 0).

    The last layer's output is shifted by ``OUTPUT_OFFSET`` along the unit
    all-ones direction, so an all-zero pre-activation (zero input with zero
    biases, or a dead trunk) still normalises to a unit row.
    """
    num_layers = len(params) // 2
    h = batch
    trunk = batch
    for k in range(num_layers):
        h = nx.add(nx.matmul(h, params[2 * k]), params[2 * k + 1])
        if k < num_layers - 1:
            h = nx.relu(h)
        if k == trunk_layers - 1:
            trunk = h
    return nx.l2_normalize_rows(nx.add(h, output_shift(nx.value_of(h).shape[1]))), trunk


def output_shift(embed_dim: int) -> np.ndarray:
    return np.full((1, embed_dim), OUTPUT_OFFSET / np.sqrt(embed_dim))


def init(config: EncoderConfig, seed) -> Encoder:
    """Glorot-uniform weights, zero biases. ``seed`` may be an int or a Generator."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros((1, fan_out)))
    return Encoder(config, weights, biases)


def from_bytes(data: bytes, path: Optional[PathLike] = None) -> Encoder:
    r = Reader(data, MAGIC, path=path)
    input_dim, n_hidden = r.unpack('II')
    hidden = r.unpack(f'{n_hidden}I')
    (n_head,) = r.unpack('I')
    head = r.unpack(f'{n_head}I')
    config = EncoderConfig(input_dim, tuple(hidden), tuple(head))
    try:
        config.validate()
    except ConfigError as exc:
        r.fail(f'invalid encoder config: {exc}')
    dims = config.layer_dims
    weights, biases = [], []
    for k in range(len(dims) - 1):
        start = r.offset
        weight = r.matrix()
        bias = r.matrix()
        if weight.shape != (dims[k], dims[k + 1]) or bias.shape != (1, dims[k + 1]):
            r.fail(f'layer {k} has shape {weight.shape}/{bias.shape}', offset=start)
        weights.append(weight)
        biases.append(bias)
    r.finish()
    return Encoder(config, weights, biases)


def save(encoder: Encoder, path: PathLike):
    write_bytes_atomic(path, encoder.to_bytes())


def load(path: PathLike) -> Encoder:
    return from_bytes(read_bytes(path), path=path)
