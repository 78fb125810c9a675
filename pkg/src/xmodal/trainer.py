"""Two-phase training: AVID pre-training, then optional CMA refinement.

Both phases share one loop: shuffle, sample views, encode both modalities on a
tape, evaluate the phase loss, back-propagate, take an Adam step and EMA-update
the batch's memory rows. ``RunState`` carries everything needed to resume a
run bit-exactly, including the random streams.
"""
import copy
from dataclasses import asdict, dataclass, field, replace
import json
import logging
import math
import time
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from . import avid_loss, cma
from . import encoder as enc
from . import membank
from . import numerics as nx
from .cma import CmaConfig
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .eval import collapse_diagnostic
from .formats import PathLike, Reader, Writer, read_bytes, write_bytes_atomic
from .synthdata import Dataset, UnlabeledDataset

logger = logging.getLogger(__name__)

MAGIC = b'XMRS'
VERSION = 1

VARIANTS = ('self', 'cross', 'joint')
RNG_STREAMS = ('video_init', 'audio_init', 'bank_init', 'order', 'views', 'negatives', 'positives')

EpochCallback = Callable[['RunState', dict], None]


@dataclass(frozen=True)
class TrainConfig:
    variant: str = 'cross'
    epochs: int = 400
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    tau: float = 0.07
    num_negatives: int = 1024
    momentum: float = 0.5
    seed: int = 0
    view_noise: float = 0.05
    hidden_dims: Tuple[int, ...] = (512, 512)
    head_dims: Tuple[int, ...] = (512, 512, 128)
    cma: Optional[CmaConfig] = None
    cma_init_epoch: int = 200

    def validate(self, num_instances: Optional[int] = None):
        if self.variant not in VARIANTS:
            raise ConfigError(f'must be one of {", ".join(VARIANTS)}', 'variant')
        if self.epochs < 1:
            raise ConfigError('must be >= 1', 'epochs')
        if self.batch_size < 1 or (num_instances is not None and self.batch_size > num_instances):
            raise ConfigError(f'must lie in [1, N={num_instances}]', 'batch_size')
        if not self.lr > 0:
            raise ConfigError('must be > 0', 'lr')
        if self.weight_decay < 0:
            raise ConfigError('must be >= 0', 'weight_decay')
        if not self.tau > 0:
            raise ConfigError('must be > 0', 'tau')
        if self.num_negatives < 1:
            raise ConfigError('must be >= 1', 'num_negatives')
        if not 0 < self.momentum < 1:
            raise ConfigError('must lie in (0, 1)', 'momentum')
        if self.view_noise < 0:
            raise ConfigError('must be >= 0', 'view_noise')
        if num_instances is not None and num_instances < 2:
            raise ConfigError('need at least 2 instances', 'dataset')
        if self.cma is not None:
            if not 1 <= self.cma_init_epoch < self.epochs:
                raise ConfigError(f'must lie in [1, epochs={self.epochs})', 'cma_init_epoch')
            self.cma.validate(num_instances)

    def encoder_config(self, input_dim: int) -> enc.EncoderConfig:
        return enc.EncoderConfig(input_dim, tuple(self.hidden_dims), tuple(self.head_dims))

    def snapshot(self) -> dict:
        out = asdict(self)
        out['hidden_dims'] = list(self.hidden_dims)
        out['head_dims'] = list(self.head_dims)
        return out


@dataclass(eq=False)
class RunState:
    phase: str
    epoch: int
    video_encoder: enc.Encoder
    audio_encoder: enc.Encoder
    bank: membank.MemoryBank
    optimizer: nx.AdamState
    rngs: Dict[str, np.random.Generator]
    dataset_digest: str
    config: dict
    metrics: List[dict] = field(default_factory=list)
    updates: int = 0
    agreement: Optional[cma.AgreementSets] = None

    def parameters(self) -> List[np.ndarray]:
        return self.video_encoder.parameters() + self.audio_encoder.parameters()

    def set_parameters(self, params: List[np.ndarray]):
        split = len(self.video_encoder.parameters())
        self.video_encoder = self.video_encoder.with_parameters(params[:split])
        self.audio_encoder = self.audio_encoder.with_parameters(params[split:])

    def to_bytes(self) -> bytes:
        meta = {
            'phase': self.phase,
            'epoch': self.epoch,
            'updates': self.updates,
            'dataset_digest': self.dataset_digest,
            'config': self.config,
            'optimizer': self.optimizer.hyperparameters(),
            'rngs': {name: gen.bit_generator.state for name, gen in self.rngs.items()},
            'metrics': self.metrics,
        }
        moments = Writer(b'ADAM', 1)
        moments.pack('I', len(self.optimizer.first_moment))
        for m in self.optimizer.first_moment + self.optimizer.second_moment:
            moments.matrix(m)
        sections = [
            (b'video_encoder', self.video_encoder.to_bytes()),
            (b'audio_encoder', self.audio_encoder.to_bytes()),
            (b'bank', self.bank.to_bytes()),
            (b'adam', moments.getvalue()),
            (b'agreement', self.agreement.to_bytes() if self.agreement is not None else b''),
        ]
        w = Writer(MAGIC, VERSION)
        w.blob(json.dumps(meta, sort_keys=True).encode('utf-8'))
        w.pack('I', len(sections))
        for name, payload in sections:
            w.pack('I', len(name))
            w.array(np.frombuffer(name, dtype=np.uint8), '<u1')
            w.blob(payload)
        return w.getvalue()


def _unlabeled(data: Union[Dataset, UnlabeledDataset]) -> UnlabeledDataset:
    return data.unlabeled() if isinstance(data, Dataset) else data


def _rng_streams(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}


def init_state(data: Union[Dataset, UnlabeledDataset], config: TrainConfig) -> RunState:
    """Randomly initialised encoders and bank, before any update."""
    data = _unlabeled(data)
    config.validate(len(data))
    rngs = _rng_streams(config.seed)
    dim_a, dim_b = data.dims
    video = enc.init(config.encoder_config(dim_a), rngs['video_init'])
    audio = enc.init(config.encoder_config(dim_b), rngs['audio_init'])
    bank = membank.init_random(len(data), video.config.embed_dim, rngs['bank_init'], config.momentum)
    params = video.parameters() + audio.parameters()
    optimizer = nx.AdamState.for_params(params, learning_rate=config.lr, weight_decay=config.weight_decay)
    return RunState('avid', 0, video, audio, bank, optimizer, rngs, data.digest, config.snapshot())


def _check_compatible(state: RunState, data: UnlabeledDataset):
    dim_a, dim_b = data.dims
    if state.video_encoder.config.input_dim != dim_a or state.audio_encoder.config.input_dim != dim_b:
        raise ShapeError(
            f'checkpoint encoders take ({state.video_encoder.config.input_dim}, {state.audio_encoder.config.input_dim}) '
            f'inputs but the dataset has dims ({dim_a}, {dim_b})'
        )
    if len(state.bank) != len(data):
        raise ShapeError(f'checkpoint bank has {len(state.bank)} rows but the dataset has {len(data)} instances')
    if state.dataset_digest != data.digest:
        raise ContractError('checkpoint was trained on a different dataset')


def _train_epoch(state: RunState, data: UnlabeledDataset, config: TrainConfig, loss_fn, calibrate=None) -> dict:
    """One pass over the data. ``calibrate(v, a)`` sees each batch's embeddings before the loss."""
    started = time.perf_counter()
    order = state.rngs['order'].permutation(len(data))
    sums: Dict[str, float] = {}
    seen = 0
    for batch_idx, start in enumerate(range(0, len(order), config.batch_size)):
        ids = order[start:start + config.batch_size]
        view_a, view_b = data.sample_views(ids, state.rngs['views'], config.view_noise)
        tape = nx.Tape()
        out_v = state.video_encoder.forward(view_a, tape)
        out_a = state.audio_encoder.forward(view_b, tape)
        if calibrate is not None:
            calibrate(out_v.value, out_a.value)

        breakdown = loss_fn(out_v.embeddings, out_a.embeddings, ids)
        if not math.isfinite(breakdown.value):
            raise NumericError(f'non-finite loss {breakdown.value}', epoch=state.epoch, batch=batch_idx, phase=state.phase)

        grads = tape.backward(breakdown.total, out_v.params + out_a.params)
        params, state.optimizer = nx.adam_step(state.optimizer, state.parameters(), grads)
        state.set_parameters(params)
        state.updates += 1
        state.bank.ema_update(ids, out_v.value, out_a.value)

        for name, value in breakdown.record().items():
            sums[name] = sums.get(name, 0.0) + value * len(ids)
        seen += len(ids)
        logger.debug('%s epoch %d batch %d loss %.6f', state.phase, state.epoch, batch_idx, breakdown.value)

    record = {'epoch': state.epoch, 'phase': state.phase}
    record.update({name: total / seen for name, total in sums.items()})
    record.update({
        'zbar_v': state.bank.zbar_v,
        'zbar_a': state.bank.zbar_a,
        'within_zbar_v': state.bank.within_zbar_v,
        'within_zbar_a': state.bank.within_zbar_a,
        'mean_mem_dot_v': collapse_diagnostic(state.bank.video_mem),
        'mean_mem_dot_a': collapse_diagnostic(state.bank.audio_mem),
        'updates': state.updates,
        'wallclock_ms': (time.perf_counter() - started) * 1000.0,
    })
    return record


def _finish_epoch(state: RunState, record: dict, on_epoch: Optional[EpochCallback]):
    state.metrics.append(record)
    state.epoch += 1
    logger.info('%s epoch %d: loss %.5f, mem dot v=%.4f a=%.4f',
                record['phase'], record['epoch'], record['loss_total'],
                record['mean_mem_dot_v'], record['mean_mem_dot_a'])
    if on_epoch is not None:
        on_epoch(state, record)


def pretrain_avid(data: Union[Dataset, UnlabeledDataset], config: TrainConfig,
                  state: Optional[RunState] = None, on_epoch: Optional[EpochCallback] = None) -> RunState:
    """Run (or resume) the AVID phase until ``config.epochs`` epochs are complete.

    Z̄ is estimated from the very first batch and frozen. ``on_epoch`` is
    called after every epoch with the state and its metrics record.
    """
    data = _unlabeled(data)
    config.validate(len(data))
    if state is None:
        state = init_state(data, config)
    else:
        if state.phase != 'avid':
            raise ContractError(f'cannot resume AVID training from a {state.phase!r} checkpoint')
        _check_compatible(state, data)
        state = copy.deepcopy(state)

    objective = avid_loss.OBJECTIVES[config.variant]

    def loss_fn(v, a, ids):
        negatives = state.bank.sample_negatives_batch(ids, config.num_negatives, state.rngs['negatives'])
        return objective(v, a, state.bank, ids, negatives, config.tau)

    def calibrate(v, a):
        if not state.bank.frozen:
            state.bank.estimate_zbar(*avid_loss.zbar_probes(config.variant, v, a), config.tau)

    while state.epoch < config.epochs:
        record = _train_epoch(state, data, config, loss_fn, calibrate)
        _finish_epoch(state, record, on_epoch)
    return state


def refine_cma(data: Union[Dataset, UnlabeledDataset], avid_checkpoint: RunState, config: TrainConfig,
               state: Optional[RunState] = None, on_epoch: Optional[EpochCallback] = None,
               threads: int = 1) -> RunState:
    """Fine-tune an AVID checkpoint on the CMA loss for ``config.cma.epochs`` epochs.

    Positive sets are mined from the memory bank at CMA epoch 0 and every
    ``refresh_period`` epochs after. The within-modality partition constants
    used by wMPD are estimated from the first CMA batch and frozen. Pass
    ``state`` to resume an interrupted CMA run instead of starting from
    ``avid_checkpoint``.
    """
    data = _unlabeled(data)
    if config.cma is None:
        raise ConfigError('CMA refinement needs a cma block', 'cma')
    config.validate(len(data))
    cma_config = config.cma
    if state is None:
        if avid_checkpoint.phase != 'avid':
            raise ContractError(f'CMA must start from an AVID checkpoint, got {avid_checkpoint.phase!r}')
        _check_compatible(avid_checkpoint, data)
        if not avid_checkpoint.bank.frozen:
            raise ContractError('AVID checkpoint has no frozen partition constants')
        state = copy.deepcopy(avid_checkpoint)
        state.phase = 'cma'
        state.epoch = 0
        state.agreement = None
        state.config = config.snapshot()
    else:
        if state.phase != 'cma':
            raise ContractError(f'cannot resume CMA training from a {state.phase!r} checkpoint')
        _check_compatible(state, data)
        state = copy.deepcopy(state)

    def loss_fn(v, a, ids):
        sets = state.agreement
        sampled = cma.sample_positives(sets, ids, cma_config.k_p, state.rngs['positives'])
        negatives = cma.sample_negatives(state.bank, sets, ids, cma_config.k_n, state.rngs['negatives'])
        return cma.cma_loss(v, a, state.bank, sets, ids, sampled, negatives, cma_config, config.tau)

    def calibrate(v, a):
        if not state.bank.within_frozen:
            state.bank.estimate_within_zbar(v, a, config.tau)

    while state.epoch < cma_config.epochs:
        remined = False
        if state.agreement is None or cma.refresh_schedule(state.epoch, cma_config):
            state.agreement = cma.mine(state.bank, cma_config.k_pool, 'cma', epoch=state.epoch, threads=threads)
            remined = True
        record = _train_epoch(state, data, config, loss_fn, calibrate)
        record['mined_epoch'] = state.agreement.mined_epoch
        record['remined'] = remined
        _finish_epoch(state, record, on_epoch)
    return state


def _decode_section(name: str, payload: bytes, start: int, decoder, path):
    try:
        return decoder(payload)
    except FormatError as exc:
        offset = None if exc.offset is None else start + exc.offset
        raise FormatError(f'{name} section: {exc.args[0]}', offset=offset, path=path) from exc


def _restore_rng(state: dict) -> np.random.Generator:
    bit_generator = getattr(np.random, state['bit_generator'])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def from_bytes(data: bytes, path: Optional[PathLike] = None) -> RunState:
    r = Reader(data, MAGIC, path=path)
    meta_offset = r.offset + 8
    try:
        meta = json.loads(r.blob().decode('utf-8'))
        optimizer_meta = meta['optimizer']
        rngs = {name: _restore_rng(st) for name, st in meta['rngs'].items()}
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f'invalid checkpoint metadata: {exc}', offset=meta_offset, path=path) from exc

    (count,) = r.unpack('I')
    sections = {}
    for _ in range(count):
        (name_len,) = r.unpack('I')
        name = r.take(name_len).decode('utf-8', errors='replace')
        start = r.offset + 8
        sections[name] = (r.blob(), start)
    r.finish()
    missing = {'video_encoder', 'audio_encoder', 'bank', 'adam', 'agreement'} - set(sections)
    if missing:
        r.fail(f'missing sections {sorted(missing)}')

    def section(name, decoder):
        payload, start = sections[name]
        return _decode_section(name, payload, start, decoder, path)

    video = section('video_encoder', enc.from_bytes)
    audio = section('audio_encoder', enc.from_bytes)
    bank = section('bank', membank.from_bytes)
    agreement = None
    if sections['agreement'][0]:
        agreement = section('agreement', cma.from_bytes)

    def read_moments(raw):
        mr = Reader(raw, b'ADAM')
        (n_params,) = mr.unpack('I')
        mats = [mr.matrix() for _ in range(2 * n_params)]
        mr.finish()
        return mats[:n_params], mats[n_params:]

    first, second = section('adam', read_moments)
    optimizer = nx.AdamState(first, second, **optimizer_meta)
    state = RunState(
        phase=meta['phase'], epoch=int(meta['epoch']), video_encoder=video, audio_encoder=audio,
        bank=bank, optimizer=optimizer, rngs=rngs, dataset_digest=meta['dataset_digest'],
        config=meta['config'], metrics=meta['metrics'], updates=int(meta['updates']), agreement=agreement,
    )
    shapes = [p.shape for p in state.parameters()]
    if [m.shape for m in first] != shapes or [m.shape for m in second] != shapes:
        raise FormatError('optimizer moments do not match encoder parameters', offset=sections['adam'][1], path=path)
    return state


def save_checkpoint(state: RunState, path: PathLike):
    write_bytes_atomic(path, state.to_bytes())


def load_checkpoint(path: PathLike) -> RunState:
    return from_bytes(read_bytes(path), path=path)


def config_from_snapshot(snapshot: dict) -> TrainConfig:
    values = dict(snapshot)
    if values.get('cma') is not None:
        values['cma'] = CmaConfig(**values['cma'])
    values['hidden_dims'] = tuple(values['hidden_dims'])
    values['head_dims'] = tuple(values['head_dims'])
    return TrainConfig(**values)


def with_lambda(config: TrainConfig, lam: float) -> TrainConfig:
    if config.cma is None:
        raise ConfigError('no cma block to sweep', 'cma')
    return replace(config, cma=replace(config.cma, lam=float(lam)))


def write_metrics_line(fh, record: dict):
    fh.write(json.dumps(record, sort_keys=True) + '\n')
    fh.flush()


def read_metrics(path: PathLike) -> pd.DataFrame:
    """Load a metrics stream (one JSON object per line) into a DataFrame."""
    return pd.read_json(path, lines=True)
