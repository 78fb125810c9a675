"""Command-line entry point: ``python -m xmodal <command> ...``.

Every command writes a JSON run manifest before doing any work, so each output
can be traced back to its config, dataset hash, seed and code version.
"""
import argparse
from dataclasses import asdict, dataclass, field, replace
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from . import cma, config as cfg, eval as ev, membank, plotter, synthdata, trainer
from .errors import ConfigError, FormatError, NumericError, XmodalError
from .formats import read_bytes, sha256_file

logger = logging.getLogger(__name__)

EXIT_CODES = {ConfigError: 1, FormatError: 2, NumericError: 3}

METRICS_FILE = 'metrics.jsonl'
MANIFEST_FILE = 'manifest.json'


@dataclass
class RunManifest:
    command: str
    code_version: str = __version__
    seed: Optional[int] = None
    config: Optional[dict] = None
    dataset_sha256: Optional[str] = None
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def write(self, path: str):
        folder = os.path.dirname(os.path.abspath(path))
        os.makedirs(folder, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write('\n')


def _out_path(out: str, name: str) -> str:
    return os.path.join(out, name)


def _threads(args) -> int:
    return args.threads if args.threads is not None else cfg.env_threads()


def _load_dataset(path: str):
    dataset = synthdata.load(path)
    return dataset, sha256_file(path)


def _load_bank(path: str) -> membank.MemoryBank:
    """Memory bank from a bank file or from the bank section of a run checkpoint."""
    data = read_bytes(path)
    if data[:4] == trainer.MAGIC:
        return trainer.from_bytes(data, path=path).bank
    return membank.from_bytes(data, path=path)


def _train_config(args) -> trainer.TrainConfig:
    if not args.config:
        raise ConfigError('a run config file is required', '--config')
    return cfg.load_train_config(args.config, seed=args.seed)


class _MetricsWriter:
    """Rewrites a metrics stream from a state's history, then appends new epochs."""

    def __init__(self, path: str, history: Sequence[dict] = ()):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.fh = open(path, 'w', encoding='utf-8')
        for record in history:
            trainer.write_metrics_line(self.fh, record)

    def __call__(self, state, record):
        trainer.write_metrics_line(self.fh, record)

    def close(self):
        self.fh.close()


def cmd_gen(args) -> int:
    spec = cfg.load_dataset_spec(args.spec) if args.spec else synthdata.DatasetSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if not args.out:
        raise ConfigError('an output path is required', '--out')
    manifest = RunManifest('gen', seed=spec.seed, config=asdict(spec), outputs={'dataset': args.out},
                           extra={'noise_sigma': spec.noise_sigma})
    manifest.write(args.out + '.manifest.json')
    digest = synthdata.save(synthdata.generate(spec), args.out)
    manifest.dataset_sha256 = digest
    manifest.write(args.out + '.manifest.json')
    print(digest)
    return 0


def _checkpoint_name(phase: str, epoch: int) -> str:
    return f'{phase}_epoch{epoch:04d}.xmrs'


def cmd_pretrain(args) -> int:
    config = _train_config(args)
    dataset, digest = _load_dataset(args.dataset)
    config.validate(len(dataset))
    out = args.out
    outputs = {'metrics': _out_path(out, METRICS_FILE), 'final': _out_path(out, _checkpoint_name('avid', config.epochs))}
    if config.cma is not None:
        outputs['cma_init'] = _out_path(out, _checkpoint_name('avid', config.cma_init_epoch))
    RunManifest('pretrain', seed=config.seed, config=config.snapshot(), dataset_sha256=digest,
                inputs={'dataset': args.dataset, 'resume': args.resume or ''}, outputs=outputs,
                ).write(_out_path(out, MANIFEST_FILE))

    state = trainer.load_checkpoint(args.resume) if args.resume else None
    writer = _MetricsWriter(outputs['metrics'], state.metrics if state is not None else ())

    def on_epoch(st, record):
        writer(st, record)
        if config.cma is not None and st.epoch == config.cma_init_epoch:
            trainer.save_checkpoint(st, outputs['cma_init'])
            logger.info('saved CMA seed checkpoint at epoch %d', st.epoch)

    try:
        state = trainer.pretrain_avid(dataset.unlabeled(), config, state=state, on_epoch=on_epoch)
    finally:
        writer.close()
    trainer.save_checkpoint(state, outputs['final'])
    if args.plot:
        plotter.plot_loss_curve(pd.DataFrame(state.metrics), title='AVID loss', savefile=_out_path(out, 'loss.png'))
    logger.info('AVID run finished: %d epochs, %d updates', state.epoch, state.updates)
    return 0


def _refine(dataset, checkpoint, config, out, threads, resume=None):
    outputs = {
        'metrics': _out_path(out, METRICS_FILE),
        'final': _out_path(out, _checkpoint_name('cma', config.cma.epochs)),
        'agreement': _out_path(out, 'agreement.xmag'),
    }
    state = trainer.load_checkpoint(resume) if resume else None
    writer = _MetricsWriter(outputs['metrics'], state.metrics if state is not None else checkpoint.metrics)
    try:
        state = trainer.refine_cma(dataset.unlabeled(), checkpoint, config, state=state, on_epoch=writer,
                                   threads=threads)
    finally:
        writer.close()
    trainer.save_checkpoint(state, outputs['final'])
    cma.save(state.agreement, outputs['agreement'])
    return state, outputs


def cmd_refine(args) -> int:
    config = _train_config(args)
    if config.cma is None:
        raise ConfigError('CMA refinement needs cma.* keys in the run config', 'cma')
    if not args.checkpoint:
        raise ConfigError('an AVID checkpoint is required', '--checkpoint')
    dataset, digest = _load_dataset(args.dataset)
    config.validate(len(dataset))
    RunManifest('refine', seed=config.seed, config=config.snapshot(), dataset_sha256=digest,
                inputs={'dataset': args.dataset, 'checkpoint': args.checkpoint, 'resume': args.resume or ''},
                outputs={'dir': args.out}).write(_out_path(args.out, MANIFEST_FILE))
    checkpoint = trainer.load_checkpoint(args.checkpoint)
    state, _ = _refine(dataset, checkpoint, config, args.out, _threads(args), resume=args.resume)
    if args.plot:
        plotter.plot_loss_curve(pd.DataFrame(state.metrics), title='CMA loss', savefile=_out_path(args.out, 'loss.png'))
    logger.info('CMA run finished: %d epochs, %d total updates', state.epoch, state.updates)
    return 0


def cmd_mine(args) -> int:
    if not args.bank or not args.out:
        raise ConfigError('--bank and --out are required', '--bank')
    outputs = {'agreement': args.out}
    digest = None
    if args.labels:
        outputs['precision'] = args.out + '.precision.csv'
        digest = sha256_file(args.labels)
    RunManifest('mine', dataset_sha256=digest, config={'method': args.method, 'k_pool': args.k},
                inputs={'bank': args.bank, 'labels': args.labels or ''}, outputs=outputs,
                ).write(args.out + '.manifest.json')
    bank = _load_bank(args.bank)
    sets = cma.mine(bank, args.k, args.method, threads=_threads(args))
    cma.save(sets, args.out)
    if args.labels:
        dataset = synthdata.load(args.labels)
        curve = pd.DataFrame({'K': np.arange(1, sets.k_pool + 1)})
        for method in cma.METHODS:
            other = sets if method == args.method else cma.mine(bank, args.k, method, threads=_threads(args))
            curve[method] = list(cma.precision_at_k(other, dataset.labels).values())
        curve.to_csv(outputs['precision'], index=False)
        print(curve.set_index('K').loc[sets.k_pool].to_string())
        if args.plot:
            plotter.plot_precision_curve(curve.set_index('K'), savefile=args.out + '.precision.png')
    return 0


def _sources(args, has_encoders: bool) -> List[str]:
    if args.sources:
        return [s.strip() for s in args.sources.split(',') if s.strip()]
    return list(ev.FEATURE_SOURCES if has_encoders else ev.MEMORY_SOURCES)


def cmd_probe(args) -> int:
    if not args.out:
        raise ConfigError('an output report path is required', '--out')
    if bool(args.checkpoint) == bool(args.bank):
        raise ConfigError('give exactly one of --checkpoint or --bank', '--checkpoint')
    dataset, digest = _load_dataset(args.dataset)
    source_path = args.checkpoint or args.bank
    seed = args.seed if args.seed is not None else 0
    RunManifest('probe', seed=seed, dataset_sha256=digest,
                config={'repeats': args.repeats, 'probe_epochs': args.probe_epochs},
                inputs={'dataset': args.dataset, 'source': source_path},
                outputs={'report': args.out}).write(args.out + '.manifest.json')
    if args.checkpoint:
        state = trainer.load_checkpoint(args.checkpoint)
        results = ev.probe_state(state, dataset, _sources(args, True), repeats=args.repeats, seed=seed,
                                 epochs=args.probe_epochs)
    else:
        bank = _load_bank(args.bank)
        results = ev.probe_sources(dataset, _sources(args, False), bank=bank, repeats=args.repeats, seed=seed,
                                   epochs=args.probe_epochs)
    report = {source: result.record() for source, result in results.items()}
    with open(args.out, 'w', encoding='utf-8') as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for source, result in results.items():
        print(f'{source}: {result.top1_accuracy:.4f} +- {result.accuracy_std:.4f}')
    return 0


def cmd_diagnose(args) -> int:
    if not args.bank:
        raise ConfigError('a bank or checkpoint file is required', '--bank')
    out = args.out or os.path.dirname(os.path.abspath(args.bank))
    outputs = {'report': _out_path(out, 'diagnose.json'), 'norms': _out_path(out, 'norms.csv')}
    RunManifest('diagnose', inputs={'bank': args.bank}, outputs=outputs).write(_out_path(out, 'diagnose.manifest.json'))
    bank = _load_bank(args.bank)
    report = {
        'mean_mem_dot_v': ev.collapse_diagnostic(bank.video_mem),
        'mean_mem_dot_a': ev.collapse_diagnostic(bank.audio_mem),
        'zbar_v': bank.zbar_v,
        'zbar_a': bank.zbar_a,
        'within_zbar_v': bank.within_zbar_v,
        'within_zbar_a': bank.within_zbar_a,
        'num_instances': len(bank),
    }
    with open(outputs['report'], 'w', encoding='utf-8') as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    frames = []
    for modality in membank.MODALITIES:
        hist = ev.norm_histogram(bank.memory(modality), bins=args.bins)
        hist.insert(0, 'modality', modality)
        frames.append(hist)
        if args.plot:
            plotter.plot_norm_histogram(hist, title=f'{modality} memory norms',
                                        savefile=_out_path(out, f'norms_{modality}.png'))
    pd.concat(frames, ignore_index=True).to_csv(outputs['norms'], index=False)
    print(f"mean memory dot: video {report['mean_mem_dot_v']:+.4f} audio {report['mean_mem_dot_a']:+.4f}")
    return 0


def _parse_values(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError as exc:
        raise ConfigError(f'cannot parse {text!r}: {exc}', '--values') from exc
    if not values:
        raise ConfigError('need at least one value', '--values')
    return values


def cmd_sweep(args) -> int:
    if args.param not in ('lambda', 'cma.lambda'):
        raise ConfigError(f'only lambda can be swept, got {args.param!r}', '--param')
    config = _train_config(args)
    values = _parse_values(args.values)
    if not args.checkpoint:
        raise ConfigError('an AVID checkpoint is required', '--checkpoint')
    dataset, digest = _load_dataset(args.dataset)
    config.validate(len(dataset))
    sweep_csv = _out_path(args.out, 'sweep.csv')
    RunManifest('sweep', seed=config.seed, config=config.snapshot(), dataset_sha256=digest,
                inputs={'dataset': args.dataset, 'checkpoint': args.checkpoint},
                outputs={'sweep': sweep_csv}, extra={'param': 'lambda', 'values': values},
                ).write(_out_path(args.out, MANIFEST_FILE))
    checkpoint = trainer.load_checkpoint(args.checkpoint)
    sources = _sources(args, True)
    rows = []
    for lam in values:
        run_config = trainer.with_lambda(config, lam)
        run_dir = _out_path(args.out, f'lambda_{lam:g}')
        os.makedirs(run_dir, exist_ok=True)
        with open(_out_path(run_dir, 'config.txt'), 'w', encoding='utf-8') as fh:
            fh.write(cfg.dump_train_config(run_config))
        state, _ = _refine(dataset, checkpoint, run_config, run_dir, _threads(args))
        for source, result in ev.probe_state(state, dataset, sources, repeats=args.repeats,
                                             seed=run_config.seed, epochs=args.probe_epochs).items():
            rows.append({'lambda': lam, 'feature_source': source,
                         'accuracy_mean': result.top1_accuracy, 'accuracy_std': result.accuracy_std})
        logger.info('lambda=%g done', lam)
    sweep = pd.DataFrame(rows, columns=['lambda', 'feature_source', 'accuracy_mean', 'accuracy_std'])
    sweep.to_csv(sweep_csv, index=False)
    if args.plot:
        plotter.plot_sweep(sweep, savefile=_out_path(args.out, 'sweep.png'))
    return 0


def cmd_variants(args) -> int:
    config = _train_config(args)
    dataset, digest = _load_dataset(args.dataset)
    names = [v.strip() for v in args.variants.split(',') if v.strip()]
    for name in names:
        if name not in trainer.VARIANTS:
            raise ConfigError(f'unknown variant {name!r}', '--variants')
    outputs = {'json': _out_path(args.out, 'variants.json'), 'csv': _out_path(args.out, 'variants.csv')}
    RunManifest('variants', seed=config.seed, config=config.snapshot(), dataset_sha256=digest,
                inputs={'dataset': args.dataset}, outputs=outputs, extra={'variants': names},
                ).write(_out_path(args.out, MANIFEST_FILE))
    states = {'random_init': trainer.init_state(dataset.unlabeled(), replace(config, cma=None))}
    for name in names:
        run_config = replace(config, variant=name, cma=None)
        writer = _MetricsWriter(_out_path(args.out, f'{name}_{METRICS_FILE}'))
        try:
            states[name] = trainer.pretrain_avid(dataset.unlabeled(), run_config, on_epoch=writer)
        finally:
            writer.close()
        trainer.save_checkpoint(states[name], _out_path(args.out, f'{name}.xmrs'))
    report = ev.variant_report(states, dataset, _sources(args, True), repeats=args.repeats,
                               seed=config.seed, epochs=args.probe_epochs)
    with open(outputs['json'], 'w', encoding='utf-8') as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    report.long_form().to_csv(outputs['csv'], index=False)
    print(report.means.round(4).to_string())
    return 0


COMMANDS = {
    'gen': cmd_gen,
    'pretrain': cmd_pretrain,
    'refine': cmd_refine,
    'mine': cmd_mine,
    'probe': cmd_probe,
    'diagnose': cmd_diagnose,
    'sweep': cmd_sweep,
    'variants': cmd_variants,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='run config file (key=value)')
    common.add_argument('--dataset', help='dataset file (XMDS)')
    common.add_argument('--out', help='output file or directory')
    common.add_argument('--seed', type=int, help='overrides the config seed')
    common.add_argument('--threads', type=int, help='mining parallelism (default $XMODAL_THREADS or 1)')
    common.add_argument('--verbose', '-v', action='store_true', help='debug logging')

    probing = argparse.ArgumentParser(add_help=False)
    probing.add_argument('--sources', help='comma-separated feature sources')
    probing.add_argument('--repeats', type=int, default=5, help='seeded train/validation splits')
    probing.add_argument('--probe-epochs', type=int, default=ev.PROBE_EPOCHS)

    parser = argparse.ArgumentParser(prog='xmodal', description='Audio-visual instance discrimination on synthetic data')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen', parents=[common], help='generate a synthetic dataset')
    p.add_argument('--spec', help='dataset spec file (key=value); defaults when omitted')

    p = sub.add_parser('pretrain', parents=[common], help='AVID pre-training')
    p.add_argument('--resume', help='run checkpoint to resume from')
    p.add_argument('--plot', action='store_true', help='write loss.png')

    p = sub.add_parser('refine', parents=[common], help='CMA refinement from an AVID checkpoint')
    p.add_argument('--checkpoint', help='AVID run checkpoint')
    p.add_argument('--resume', help='CMA run checkpoint to resume from')
    p.add_argument('--plot', action='store_true', help='write loss.png')

    p = sub.add_parser('mine', parents=[common], help='mine agreement sets from a memory bank')
    p.add_argument('--bank', help='bank file or run checkpoint')
    p.add_argument('--method', default='cma', choices=cma.METHODS)
    p.add_argument('--k', type=int, default=32, help='K_pool')
    p.add_argument('--labels', help='dataset file; writes the precision@K curve of every method')
    p.add_argument('--plot', action='store_true')

    p = sub.add_parser('probe', parents=[common, probing], help='linear probes on frozen features')
    p.add_argument('--checkpoint', help='run checkpoint')
    p.add_argument('--bank', help='bank file (memory sources only)')

    p = sub.add_parser('diagnose', parents=[common], help='collapse metric and norm histogram')
    p.add_argument('--bank', help='bank file or run checkpoint')
    p.add_argument('--bins', type=int, default=20)
    p.add_argument('--plot', action='store_true')

    p = sub.add_parser('sweep', parents=[common, probing], help='refine and probe for several lambda values')
    p.add_argument('--checkpoint', help='AVID run checkpoint')
    p.add_argument('--param', default='lambda')
    p.add_argument('--values', default='0,0.5,1,2')
    p.add_argument('--plot', action='store_true')

    p = sub.add_parser('variants', parents=[common, probing], help='train and compare Self/Cross/Joint AVID')
    p.add_argument('--variants', default=','.join(trainer.VARIANTS))
    return parser


def _configure_logging(verbose: bool):
    level = 'DEBUG' if verbose else cfg.env_log_level()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s', stream=sys.stderr)


def exit_code(exc: XmodalError) -> int:
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    needs_dataset = args.command in ('pretrain', 'refine', 'probe', 'sweep', 'variants')
    try:
        if needs_dataset and not args.dataset:
            raise ConfigError('a dataset file is required', '--dataset')
        if args.command in ('pretrain', 'refine', 'sweep', 'variants') and not args.out:
            raise ConfigError('an output directory is required', '--out')
        return COMMANDS[args.command](args)
    except XmodalError as exc:
        print(f'error[{exc.kind}]: {exc}', file=sys.stderr)
        return exit_code(exc)
