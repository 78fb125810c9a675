import json
import os

import pandas as pd
import pytest

import oracle
from xmodal import cli, cma, config as cfg, synthdata, trainer
from xmodal.errors import NumericError

SPEC_TEXT = """num_classes = 4
instances_per_class = 8
dim_a = 6
dim_b = 5
confound_pairs_a = 0-1
confound_pairs_b = 2-3
seed = 3
"""


@pytest.fixture
def workspace(tmp_path, small_cma_config):
    """Dataset, run config and spec files in a temporary directory."""
    spec = tmp_path / 'spec.cfg'
    spec.write_text(SPEC_TEXT)
    run = tmp_path / 'run.cfg'
    run.write_text(cfg.dump_train_config(small_cma_config))
    dataset = tmp_path / 'data.xmds'
    assert cli.main(['gen', '--spec', str(spec), '--out', str(dataset)]) == 0
    return tmp_path


@pytest.fixture
def pretrained(workspace):
    out = workspace / 'avid'
    argv = ['pretrain', '--config', str(workspace / 'run.cfg'), '--dataset', str(workspace / 'data.xmds'),
            '--out', str(out)]
    assert cli.main(argv) == 0
    return out


def test_gen_is_deterministic(tmp_path, capsys):
    spec = tmp_path / 'spec.cfg'
    spec.write_text(SPEC_TEXT)
    digests = []
    for name in ('a.xmds', 'b.xmds'):
        assert cli.main(['gen', '--spec', str(spec), '--out', str(tmp_path / name)]) == 0
        digests.append(capsys.readouterr().out.strip())
    assert digests[0] == digests[1]
    assert (tmp_path / 'a.xmds').read_bytes() == (tmp_path / 'b.xmds').read_bytes()
    manifest = json.loads((tmp_path / 'a.xmds.manifest.json').read_text())
    assert manifest['dataset_sha256'] == digests[0]
    assert manifest['seed'] == 3


def test_gen_matches_library(workspace):
    dataset = synthdata.load(workspace / 'data.xmds')
    assert len(dataset) == 32 and dataset.num_classes == 4


def test_pretrain_outputs(workspace, pretrained):
    manifest = json.loads((pretrained / 'manifest.json').read_text())
    assert manifest['command'] == 'pretrain'
    assert manifest['seed'] == 11
    assert manifest['config']['variant'] == 'cross'
    metrics = trainer.read_metrics(str(pretrained / 'metrics.jsonl'))
    assert metrics['epoch'].tolist() == [0, 1, 2]
    final = trainer.load_checkpoint(pretrained / 'avid_epoch0003.xmrs')
    assert final.epoch == 3
    # the CMA seed checkpoint is saved at cma_init_epoch
    assert trainer.load_checkpoint(pretrained / 'avid_epoch0002.xmrs').epoch == 2


def test_pretrain_resume(workspace, pretrained):
    out = workspace / 'resumed'
    argv = ['pretrain', '--config', str(workspace / 'run.cfg'), '--dataset', str(workspace / 'data.xmds'),
            '--out', str(out), '--resume', str(pretrained / 'avid_epoch0002.xmrs')]
    assert cli.main(argv) == 0
    a = trainer.load_checkpoint(pretrained / 'avid_epoch0003.xmrs')
    b = trainer.load_checkpoint(out / 'avid_epoch0003.xmrs')
    assert a.video_encoder == b.video_encoder and a.bank == b.bank
    assert len((out / 'metrics.jsonl').read_text().splitlines()) == 3


def test_refine_outputs(workspace, pretrained):
    out = workspace / 'cma'
    argv = ['refine', '--config', str(workspace / 'run.cfg'), '--dataset', str(workspace / 'data.xmds'),
            '--checkpoint', str(pretrained / 'avid_epoch0002.xmrs'), '--out', str(out)]
    assert cli.main(argv) == 0
    state = trainer.load_checkpoint(out / 'cma_epoch0003.xmrs')
    assert state.phase == 'cma'
    assert cma.load(out / 'agreement.xmag') == state.agreement
    phases = trainer.read_metrics(str(out / 'metrics.jsonl'))['phase'].tolist()
    assert phases == ['avid', 'avid', 'cma', 'cma', 'cma']


@pytest.mark.parametrize('method', cma.METHODS)
def test_mine_matches_reference(workspace, pretrained, method):
    out = workspace / f'{method}.xmag'
    ckpt = pretrained / 'avid_epoch0003.xmrs'
    argv = ['mine', '--bank', str(ckpt), '--method', method, '--k', '4', '--out', str(out)]
    assert cli.main(argv) == 0
    bank = trainer.load_checkpoint(ckpt).bank
    expected = oracle.mine(bank.video_mem, bank.audio_mem, 4, method)
    assert cma.load(out).positives.tolist() == expected


def test_mine_precision_curve(workspace, pretrained):
    out = workspace / 'sets.xmag'
    argv = ['mine', '--bank', str(pretrained / 'avid_epoch0003.xmrs'), '--k', '4', '--out', str(out),
            '--labels', str(workspace / 'data.xmds')]
    assert cli.main(argv) == 0
    curve = pd.read_csv(str(out) + '.precision.csv')
    assert list(curve.columns) == ['K', *cma.METHODS]
    assert curve['K'].tolist() == [1, 2, 3, 4]
    assert ((curve[list(cma.METHODS)] >= 0) & (curve[list(cma.METHODS)] <= 1)).all().all()


def test_probe_report(workspace, pretrained):
    report = workspace / 'probe.json'
    argv = ['probe', '--checkpoint', str(pretrained / 'avid_epoch0003.xmrs'), '--dataset',
            str(workspace / 'data.xmds'), '--out', str(report), '--sources', 'video_enc,concat_mem',
            '--repeats', '2', '--probe-epochs', '20']
    assert cli.main(argv) == 0
    body = json.loads(report.read_text())
    assert set(body) == {'video_enc', 'concat_mem'}
    assert len(body['video_enc']['split_accuracies']) == 2
    assert os.path.exists(str(report) + '.manifest.json')


def test_probe_needs_one_source(workspace, pretrained, capsys):
    ckpt = str(pretrained / 'avid_epoch0003.xmrs')
    argv = ['probe', '--checkpoint', ckpt, '--bank', ckpt, '--dataset', str(workspace / 'data.xmds'),
            '--out', str(workspace / 'p.json')]
    assert cli.main(argv) == 1
    assert 'error[config]' in capsys.readouterr().err


def test_diagnose(workspace, pretrained):
    out = workspace / 'diag'
    argv = ['diagnose', '--bank', str(pretrained / 'avid_epoch0003.xmrs'), '--out', str(out), '--bins', '5']
    assert cli.main(argv) == 0
    report = json.loads((out / 'diagnose.json').read_text())
    assert -1.0 <= report['mean_mem_dot_v'] <= 1.0
    assert report['num_instances'] == 32
    norms = pd.read_csv(out / 'norms.csv')
    assert len(norms) == 10
    assert norms.groupby('modality')['count'].sum().tolist() == [32, 32]


def test_sweep(workspace, pretrained):
    out = workspace / 'sweep'
    argv = ['sweep', '--config', str(workspace / 'run.cfg'), '--dataset', str(workspace / 'data.xmds'),
            '--checkpoint', str(pretrained / 'avid_epoch0002.xmrs'), '--out', str(out), '--values', '0,1',
            '--sources', 'video_enc,video_mem', '--repeats', '1', '--probe-epochs', '20']
    assert cli.main(argv) == 0
    sweep = pd.read_csv(out / 'sweep.csv')
    assert len(sweep) == 4
    assert sweep.groupby('feature_source').size().tolist() == [2, 2]
    assert cfg.load_train_config(out / 'lambda_0' / 'config.txt').cma.lam == 0.0
    assert (out / 'lambda_1' / 'agreement.xmag').exists()


def test_variants(workspace):
    out = workspace / 'variants'
    argv = ['variants', '--config', str(workspace / 'run.cfg'), '--dataset', str(workspace / 'data.xmds'),
            '--out', str(out), '--variants', 'self,cross', '--sources', 'video_enc', '--repeats', '1',
            '--probe-epochs', '20']
    assert cli.main(argv) == 0
    frame = pd.read_csv(out / 'variants.csv')
    assert sorted(frame['variant']) == ['cross', 'random_init', 'self']
    assert (out / 'self.xmrs').exists() and (out / 'cross_metrics.jsonl').exists()


def test_missing_config_exit_code(workspace, capsys):
    argv = ['pretrain', '--config', str(workspace / 'absent.cfg'), '--dataset', str(workspace / 'data.xmds'),
            '--out', str(workspace / 'x')]
    assert cli.main(argv) == 1
    assert 'error[config]' in capsys.readouterr().err


def test_corrupt_dataset_exit_code(workspace, capsys):
    bad = workspace / 'bad.xmds'
    bad.write_bytes(b'XMDS' + b'\x00' * 3)
    argv = ['pretrain', '--config', str(workspace / 'run.cfg'), '--dataset', str(bad), '--out', str(workspace / 'x')]
    assert cli.main(argv) == 2
    assert 'error[format]' in capsys.readouterr().err


def test_numeric_error_exit_code(monkeypatch, workspace, capsys):
    def diverge(*args, **kwargs):
        raise NumericError('loss is nan', epoch=0, batch=1, phase='avid')

    monkeypatch.setattr(trainer, 'pretrain_avid', diverge)
    argv = ['pretrain', '--config', str(workspace / 'run.cfg'), '--dataset', str(workspace / 'data.xmds'),
            '--out', str(workspace / 'x')]
    assert cli.main(argv) == 3
    assert 'error[numeric]' in capsys.readouterr().err


def test_missing_dataset_flag(capsys):
    assert cli.main(['probe', '--out', 'p.json']) == 1
    assert '--dataset' in capsys.readouterr().err


def test_diagnose_plots(workspace, pretrained):
    pytest.importorskip('matplotlib')
    out = workspace / 'diag'
    argv = ['diagnose', '--bank', str(pretrained / 'avid_epoch0003.xmrs'), '--out', str(out), '--plot']
    assert cli.main(argv) == 0
    assert (out / 'norms_video.png').exists() and (out / 'norms_audio.png').exists()
