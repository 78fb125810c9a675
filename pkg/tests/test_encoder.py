import numpy as np
import pytest

from xmodal import encoder as enc
from xmodal import numerics as nx
from xmodal.errors import ConfigError, FormatError, ShapeError

TOY = enc.EncoderConfig(input_dim=5, hidden_dims=(7,), head_dims=(6, 4))


def test_init_is_deterministic_and_biases_zero():
    a = enc.init(TOY, 0)
    b = enc.init(TOY, 0)
    assert a == b
    assert all(np.array_equal(bias, np.zeros_like(bias)) for bias in a.biases)
    assert a != enc.init(TOY, 1)


def test_glorot_limits():
    model = enc.init(TOY, 3)
    for w in model.weights:
        fan_in, fan_out = w.shape
        assert np.abs(w).max() <= np.sqrt(6.0 / (fan_in + fan_out))


def test_pre_activation_variance_on_unit_variance_input():
    # balanced fan-in/fan-out keeps Glorot's variance near 1 layer by layer
    config = enc.EncoderConfig(input_dim=256, hidden_dims=(256,), head_dims=(256, 256))
    model = enc.init(config, 0)
    rng = np.random.default_rng(1)
    for w in model.weights:
        x = rng.standard_normal((1000, w.shape[0]))
        assert 0.5 <= (x @ w).var() <= 2.0


def test_forward_rows_unit_norm():
    model = enc.init(TOY, 0)
    x = np.random.default_rng(2).standard_normal((9, 5)) * 100.0
    out = model.forward(x)
    assert out.value.shape == (9, 4)
    assert np.allclose(np.linalg.norm(out.value, axis=1), 1.0, atol=1e-10)
    assert out.trunk.shape == (9, 7)


def test_identical_rows_identical_outputs():
    model = enc.init(TOY, 0)
    x = np.tile(np.arange(5.0), (3, 1))
    out = model.embed(x)
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        enc.init(TOY, 0).forward(np.zeros((2, 4)))


def test_traced_forward_returns_params_in_order():
    model = enc.init(TOY, 0)
    tape = nx.Tape()
    out = model.forward(np.ones((2, 5)), tape)
    assert [p.value.shape for p in out.params] == [p.shape for p in model.parameters()]


@pytest.mark.parametrize('seed', range(3))
def test_gradient_through_forward(seed):
    model = enc.init(TOY, seed)
    rng = np.random.default_rng(seed + 10)
    x = rng.standard_normal((4, 5))
    target = nx.l2_normalize_rows(rng.standard_normal((4, 4)))

    def loss(*params):
        emb, _ = enc.apply(params, x, model.trunk_layers)
        return nx.mean(nx.exp(nx.mul(emb, target)))

    assert nx.check_gradients(loss, model.parameters()).relative_error < 1e-5


def test_zero_input_embeds_to_unit_row():
    model = enc.init(TOY, 0)
    out = model.embed(np.zeros((3, 5)))
    expected = np.full(4, 0.5)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)
    assert np.allclose(out, expected, atol=1e-12)


def dead_trunk(model):
    params = model.parameters()
    params[1] = np.full_like(params[1], -10.0)
    return model.with_parameters(params)


def test_dead_trunk_still_unit_norm():
    model = dead_trunk(enc.init(TOY, 1))
    out = model.forward(np.random.default_rng(0).uniform(-1, 1, (6, 5)))
    assert np.all(nx.value_of(out.trunk) == 0.0)
    assert np.allclose(np.linalg.norm(out.value, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize('seed', [2, 11])
def test_gradient_with_dead_trunk(seed):
    config = enc.EncoderConfig(input_dim=4, hidden_dims=(5,), head_dims=(3,))
    model = dead_trunk(enc.init(config, seed))
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 4))
    target = nx.l2_normalize_rows(rng.standard_normal((2, 3)))

    def loss(*params):
        emb, _ = enc.apply(params, x, model.trunk_layers)
        return nx.mean(nx.exp(nx.mul(emb, target)))

    assert nx.check_gradients(loss, model.parameters()).relative_error < 1e-5


def test_encoders_share_no_parameters():
    video = enc.init(TOY, 0)
    audio = enc.init(TOY, 0)
    snapshot = [p.copy() for p in audio.parameters()]
    video.weights[0][0, 0] += 1.0
    assert all(np.array_equal(a, b) for a, b in zip(audio.parameters(), snapshot))


def test_invalid_config():
    with pytest.raises(ConfigError):
        enc.init(enc.EncoderConfig(input_dim=3, hidden_dims=(4,), head_dims=(1,)), 0)


def test_checkpoint_round_trip(tmp_path):
    model = enc.init(TOY, 4)
    path = tmp_path / 'video.xmck'
    enc.save(model, path)
    loaded = enc.load(path)
    assert loaded == model
    assert loaded.to_bytes() == path.read_bytes()


def test_checkpoint_bad_magic():
    raw = bytearray(enc.init(TOY, 0).to_bytes())
    raw[:4] = b'XMDS'
    with pytest.raises(FormatError):
        enc.from_bytes(bytes(raw))
