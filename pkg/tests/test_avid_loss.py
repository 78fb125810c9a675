import math

import numpy as np
import pytest

import oracle
from xmodal import avid_loss, membank
from xmodal import encoder as enc
from xmodal import numerics as nx
from xmodal.errors import ContractError, ShapeError


def unit(rng, n, d):
    return nx.l2_normalize_rows(rng.standard_normal((n, d)))


def frozen_bank(rng, n, d, tau=0.5):
    bank = membank.init_random(n, d, rng)
    bank.estimate_zbar(unit(rng, 4, d), unit(rng, 4, d), tau)
    return bank


def test_instance_prob_hand_example():
    # N=2, tau=1, zbar=(e+1)/2, x and target orthonormal
    ctx = avid_loss.NceContext(tau=1.0, zbar=(math.e + 1) / 2, n=2, k=1)
    x = np.array([1.0, 0.0])
    assert avid_loss.instance_prob(x, x, ctx) == pytest.approx(math.e / (math.e + 1), abs=1e-6)
    assert avid_loss.instance_prob(x, x, ctx) == pytest.approx(0.731059, abs=1e-6)


def test_instance_prob_monotone():
    ctx = avid_loss.NceContext(tau=0.1, zbar=1.5, n=10, k=3)
    x = np.array([1.0, 0.0])
    probs = [avid_loss.instance_prob(x, np.array([c, math.sqrt(1 - c * c)]), ctx) for c in np.linspace(-1, 1, 21)]
    assert all(b > a for a, b in zip(probs, probs[1:]))


def test_nce_data_probability_hand_example():
    ctx = avid_loss.NceContext(tau=1.0, zbar=(math.e + 1) / 2, n=2, k=1)
    x = np.array([1.0, 0.0])
    neg = np.array([[0.0, 1.0]])
    loss = avid_loss.nce_loss(x, x, neg, ctx)
    p_pos = math.e / (math.e + 1)
    p_neg = 1.0 / (2 * ctx.zbar)
    data_prob = p_pos / (p_pos + 0.5)
    assert data_prob == pytest.approx(0.5938454849513094, abs=1e-14)
    expected = -math.log(data_prob) - math.log(1 - p_neg / (p_neg + 0.5))
    assert float(loss[0, 0]) == pytest.approx(expected, abs=1e-12)
    assert float(loss[0, 0]) == pytest.approx(oracle.nce(x, x, neg, 1.0, ctx.zbar, 2), abs=1e-12)


@pytest.mark.parametrize('seed', range(50))
def test_nce_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    k = int(rng.integers(1, 17))
    d = int(rng.integers(2, 9))
    tau = float(rng.uniform(0.05, 1.0))
    zbar = float(rng.uniform(0.5, 5.0))
    ctx = avid_loss.NceContext(tau=tau, zbar=zbar, n=n, k=k)
    x, target = unit(rng, 1, d)[0], unit(rng, 1, d)[0]
    negatives = unit(rng, k, d)
    got = float(avid_loss.nce_loss(x, target, negatives, ctx)[0, 0])
    assert got == pytest.approx(oracle.nce(x, target, negatives, tau, zbar, n), abs=1e-10)


def test_nce_k_mismatch():
    ctx = avid_loss.NceContext(tau=1.0, zbar=1.0, n=4, k=2)
    with pytest.raises(ContractError):
        avid_loss.nce_loss(np.ones(2), np.ones(2), np.ones((3, 2)), ctx)


def test_nce_context_invariants():
    for bad in (dict(tau=0.0), dict(zbar=0.0), dict(k=0), dict(n=1)):
        values = dict(tau=1.0, zbar=1.0, n=4, k=2)
        values.update(bad)
        with pytest.raises(ContractError):
            avid_loss.NceContext(**values)


def test_nce_invariant_to_negative_order():
    rng = np.random.default_rng(3)
    ctx = avid_loss.NceContext(tau=0.2, zbar=1.3, n=20, k=6)
    x, target, negs = unit(rng, 1, 4)[0], unit(rng, 1, 4)[0], unit(rng, 6, 4)
    a = avid_loss.nce_loss(x, target, negs, ctx)
    b = avid_loss.nce_loss(x, target, negs[::-1], ctx)
    assert float(a[0, 0]) == pytest.approx(float(b[0, 0]), abs=1e-13)


def test_nce_extreme_similarity_stays_finite():
    ctx = avid_loss.NceContext(tau=1e-3, zbar=1.0, n=10, k=1)
    x = np.array([1.0, 0.0])
    loss = avid_loss.nce_loss(x, -x, np.array([[1.0, 0.0]]), ctx)
    assert np.isfinite(loss).all()
    # the noise term is clamped at -log(1e-12)
    assert float(loss[0, 0]) >= -math.log(avid_loss.NOISE_FLOOR) - 1e-9


@pytest.mark.parametrize('variant', ['self', 'cross', 'joint'])
@pytest.mark.parametrize('seed', range(50))
def test_variants_match_scalar_oracle(variant, seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 65))
    d = int(rng.integers(2, 9))
    b = int(rng.integers(1, min(n, 8) + 1))
    k = int(rng.integers(1, 17))
    tau = float(rng.uniform(0.1, 1.0))
    bank = frozen_bank(rng, n, d, tau)
    ids = rng.choice(n, size=b, replace=False)
    negatives = bank.sample_negatives_batch(ids, k, rng)
    v, a = unit(rng, b, d), unit(rng, b, d)
    got = avid_loss.OBJECTIVES[variant](v, a, bank, ids, negatives, tau)
    expected = oracle.avid(variant, v, a, bank.video_mem, bank.audio_mem, ids, negatives, tau, bank.zbar_v, bank.zbar_a)
    assert set(got.terms) == set(expected)
    for name, value in expected.items():
        assert got.terms[name] == pytest.approx(value, rel=1e-10, abs=1e-10)
    assert got.value == pytest.approx(sum(expected.values()), rel=1e-10, abs=1e-10)


def test_symmetric_banks_self_equals_cross():
    rng = np.random.default_rng(7)
    mem = unit(rng, 12, 4)
    bank = membank.init_from(mem, mem)
    bank.estimate_zbar(mem[:3], mem[:3], 0.5)
    ids = np.array([0, 3, 5])
    negatives = bank.sample_negatives_batch(ids, 4, rng)
    v = unit(rng, 3, 4)
    s = avid_loss.self_avid(v, v, bank, ids, negatives, 0.5)
    c = avid_loss.cross_avid(v, v, bank, ids, negatives, 0.5)
    j = avid_loss.joint_avid(v, v, bank, ids, negatives, 0.5)
    assert s.value == pytest.approx(c.value, abs=1e-12)
    assert j.value == pytest.approx(2 * s.value, abs=1e-12)


def test_joint_is_self_plus_cross():
    rng = np.random.default_rng(8)
    bank = frozen_bank(rng, 16, 4)
    ids = np.array([1, 2, 9])
    negatives = bank.sample_negatives_batch(ids, 5, rng)
    v, a = unit(rng, 3, 4), unit(rng, 3, 4)
    s = avid_loss.self_avid(v, a, bank, ids, negatives, 0.5)
    c = avid_loss.cross_avid(v, a, bank, ids, negatives, 0.5)
    j = avid_loss.joint_avid(v, a, bank, ids, negatives, 0.5)
    assert j.value == pytest.approx(s.value + c.value, abs=1e-12)
    assert j.record()['loss_total'] == j.value


def test_breakdown_total_is_weighted_sum():
    parts = {'x': np.array([[1.5]]), 'y': np.array([[2.0]])}
    out = avid_loss.combine(parts, {'y': 3.0})
    assert out.value == pytest.approx(7.5, abs=1e-12)
    assert out.terms == {'x': 1.5, 'y': 2.0}


def test_out_of_range_ids_are_contract_errors():
    rng = np.random.default_rng(9)
    bank = frozen_bank(rng, 8, 3)
    v, a = unit(rng, 1, 3), unit(rng, 1, 3)
    with pytest.raises(ContractError):
        avid_loss.cross_avid(v, a, bank, [8], np.zeros((1, 2), dtype=int), 0.5)
    with pytest.raises(ContractError):
        avid_loss.self_avid(v, a, bank, [0], np.array([[1, -1]]), 0.5)


def test_embedding_shape_mismatch():
    rng = np.random.default_rng(9)
    bank = frozen_bank(rng, 8, 3)
    with pytest.raises(ShapeError):
        avid_loss.self_avid(unit(rng, 2, 3), unit(rng, 1, 3), bank, [0, 1], np.ones((2, 2), dtype=int), 0.5)


def test_zbar_probes_per_variant():
    v, a = np.ones((2, 3)), np.zeros((2, 3))
    assert avid_loss.zbar_probes('self', v, a)[0] is v
    assert avid_loss.zbar_probes('cross', v, a)[0] is a
    pv, pa = avid_loss.zbar_probes('joint', v, a)
    assert pv.shape == (4, 3) and pa.shape == (4, 3)


@pytest.mark.parametrize('variant', ['self', 'cross', 'joint'])
@pytest.mark.parametrize('seed', range(20))
def test_variant_gradients_through_toy_encoders(variant, seed):
    rng = np.random.default_rng(seed)
    config = enc.EncoderConfig(input_dim=4, hidden_dims=(5,), head_dims=(3,))
    video, audio = enc.init(config, rng), enc.init(config, rng)
    bank = frozen_bank(rng, 10, 3)
    ids = np.array([0, 4, 7])
    negatives = bank.sample_negatives_batch(ids, 4, rng)
    xv, xa = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    split = len(video.parameters())

    def loss(*params):
        v, _ = enc.apply(params[:split], xv, video.trunk_layers)
        a, _ = enc.apply(params[split:], xa, audio.trunk_layers)
        return avid_loss.OBJECTIVES[variant](v, a, bank, ids, negatives, 0.5).total

    check = nx.check_gradients(loss, video.parameters() + audio.parameters())
    assert check.relative_error < 1e-5


def test_loss_decreases_on_fixed_problem():
    rng = np.random.default_rng(11)
    bank = frozen_bank(rng, 12, 4)
    ids = np.arange(4)
    negatives = bank.sample_negatives_batch(ids, 6, rng)
    params = [rng.standard_normal((4, 4)), rng.standard_normal((4, 4))]
    xv, xa = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    state = nx.AdamState.for_params(params, learning_rate=0.05)
    values = []
    for _ in range(50):
        tape = nx.Tape()
        wv, wa = tape.watch(params[0]), tape.watch(params[1])
        v = nx.l2_normalize_rows(nx.matmul(xv, wv))
        a = nx.l2_normalize_rows(nx.matmul(xa, wa))
        out = avid_loss.cross_avid(v, a, bank, ids, negatives, 0.5)
        values.append(out.value)
        params, state = nx.adam_step(state, params, tape.backward(out.total, [wv, wa]))
    assert values[-1] < values[0]
