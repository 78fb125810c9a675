from dataclasses import replace

import pytest

from xmodal import config as cfg
from xmodal.cma import CmaConfig
from xmodal.errors import ConfigError
from xmodal.trainer import TrainConfig

RUN_TEXT = """
# small run
variant = joint
epochs = 10
batch_size = 16
lr = 0.01
hidden_dims = 32,32
head_dims = 16,8
cma_init_epoch = 5
"""


def test_parse_train_config():
    config = cfg.parse_train_config(RUN_TEXT)
    assert config.variant == 'joint'
    assert config.epochs == 10 and config.batch_size == 16
    assert config.hidden_dims == (32, 32) and config.head_dims == (16, 8)
    # untouched keys keep their defaults
    assert config.tau == TrainConfig().tau
    assert config.cma is None


def test_cma_keys_enable_block():
    config = cfg.parse_train_config(RUN_TEXT + 'cma.lambda = 0.5\ncma.k_pool = 8\ncma.k_p = 4\n')
    assert config.cma == CmaConfig(k_pool=8, k_p=4, lam=0.5)


@pytest.mark.parametrize('text,key', [
    ('colour = red\n', 'colour'),
    ('epochs = 3\nepochs = 4\n', 'epochs'),
    ('lr = fast\n', 'lr'),
    ('hidden_dims = 4,x\n', 'hidden_dims'),
    ('epochs = 0\n', 'epochs'),
    ('variant = both\n', 'variant'),
])
def test_bad_keys_name_the_field(text, key):
    with pytest.raises(ConfigError) as exc:
        cfg.parse_train_config(text)
    assert exc.value.field == key
    assert key in str(exc.value)


def test_malformed_line():
    with pytest.raises(ConfigError):
        cfg.parse_pairs('epochs 3\n')


def test_cma_validation_runs_on_parse():
    with pytest.raises(ConfigError) as exc:
        cfg.parse_train_config(RUN_TEXT + 'cma.k_pool = 4\ncma.k_p = 5\n')
    assert exc.value.field == 'cma.k_p'


def test_dump_parse_round_trip():
    config = replace(cfg.parse_train_config(RUN_TEXT), cma=CmaConfig(k_pool=6, k_p=3, k_n=20, lam=2.0))
    assert cfg.parse_train_config(cfg.dump_train_config(config)) == config
    plain = cfg.parse_train_config(RUN_TEXT)
    assert cfg.parse_train_config(cfg.dump_train_config(plain)) == plain


def test_parse_dataset_spec():
    spec = cfg.parse_dataset_spec(
        'num_classes = 4\ninstances_per_class = 8\ndim_a = 6\ndim_b = 5\n'
        'confound_pairs_a = 0-1\nconfound_pairs_b = 2-3\nseed = 3\n'
    )
    assert spec.confound_pairs_a == ((0, 1),) and spec.confound_pairs_b == ((2, 3),)
    assert spec.num_instances == 32


def test_dataset_spec_errors():
    with pytest.raises(ConfigError):
        cfg.parse_dataset_spec('confound_pairs_a = 0:1\n')
    with pytest.raises(ConfigError) as exc:
        cfg.parse_dataset_spec('num_classes = 4\nconfound_pairs_a = 0-1\nconfound_pairs_b = 1-0\n')
    assert exc.value.field == 'confound_pairs_b'


def test_load_train_config_seed_override(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text(RUN_TEXT + 'seed = 4\n')
    assert cfg.load_train_config(path).seed == 4
    assert cfg.load_train_config(path, seed=9).seed == 9


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        cfg.load_train_config(tmp_path / 'absent.cfg')


def test_env_threads(monkeypatch):
    monkeypatch.delenv(cfg.ENV_THREADS, raising=False)
    assert cfg.env_threads() == 1
    monkeypatch.setenv(cfg.ENV_THREADS, '4')
    assert cfg.env_threads() == 4
    monkeypatch.setenv(cfg.ENV_THREADS, '0')
    with pytest.raises(ConfigError):
        cfg.env_threads()
    monkeypatch.setenv(cfg.ENV_THREADS, 'many')
    with pytest.raises(ConfigError):
        cfg.env_threads()


def test_env_log_level(monkeypatch):
    monkeypatch.delenv(cfg.ENV_LOG_LEVEL, raising=False)
    assert cfg.env_log_level() == 'INFO'
    monkeypatch.setenv(cfg.ENV_LOG_LEVEL, 'debug')
    assert cfg.env_log_level() == 'DEBUG'
