import warnings

import numpy as np
import pytest

from conftest import random_model
from expertnmt.corpus import ANNOT_CLOSE, ANNOT_OPEN, ANNOT_SEP, BOS, EOS
from expertnmt.model import (
    FORGET_BIAS,
    INIT_RANGE,
    ModelConfig,
    ModelParams,
    ProbabilityFloorWarning,
    backward,
    copy_project,
    decode_step,
    encode,
    forward_logprob,
    forward_loss,
    init_params,
    initial_attentional,
    param_shapes,
    teacher_forcing_arrays,
)


def test_init_deterministic_and_shaped():
    cfg = ModelConfig(10, d=4)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    assert a["E"].size == 40
    assert not np.array_equal(a["E"], init_params(cfg, 4)["E"])


def test_init_range_apart_from_forget_bias():
    cfg = ModelConfig(10, d=4, layers=2)
    p = init_params(cfg, 0)
    for name, t in p.tensors.items():
        vals = t.copy()
        if name.startswith(("enc.", "dec.")) and name.endswith(".b"):
            assert np.all(vals[4:8] == FORGET_BIAS)
            vals = np.delete(vals, np.s_[4:8])
        assert np.all(np.abs(vals) <= INIT_RANGE)


def test_single_embedding_tensor():
    shapes = param_shapes(ModelConfig(50, d=8))
    assert [n for n, s in shapes.items() if 50 in s] == ["E", "out.bias"]


@pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(d=0), dict(layers=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(10, **kw)


def test_params_reject_wrong_shapes():
    p = init_params(ModelConfig(10, d=4), 0)
    bad = dict(p.tensors)
    bad["E"] = np.zeros((9, 4))
    with pytest.raises(ValueError):
        ModelParams(p.config, bad)


def test_encode_contracts(tiny_model):
    with pytest.raises(ValueError):
        encode(tiny_model, [])
    enc = encode(tiny_model, [5])
    assert enc.H.shape == (1, 1, 4)
    enc = encode(tiny_model, np.random.default_rng(0).integers(0, 12, size=(3, 7)))
    assert np.all(np.isfinite(enc.H))


def test_encoder_mirror_symmetry():
    p = random_model(d=5, seed=2)
    p.tensors["enc.0.bwd.W"][:] = p["enc.0.fwd.W"]
    p.tensors["enc.0.bwd.b"][:] = p["enc.0.fwd.b"]
    H = encode(p, [3, 8, 9, 8, 3]).H[0]
    np.testing.assert_allclose(H, H[::-1], atol=1e-12)


def step_once(params, src, prev=BOS):
    enc = encode(params, np.asarray(src)[None])
    dist, _, _ = decode_step(params, enc.init, [prev], enc, initial_attentional(params, 1))
    return dist


def test_mixture_endpoints():
    p = random_model(seed=5)
    src = [7, 8, 9, 7]
    p.tensors["gate.b"][0] = 1e6
    d = step_once(p, src)
    np.testing.assert_allclose(d.p, d.p_gen, atol=1e-9)
    p.tensors["gate.b"][0] = -1e6
    d = step_once(p, src)
    np.testing.assert_allclose(d.p, d.p_copy, atol=1e-9)


def test_distributions_normalized_over_random_draws():
    rng = np.random.default_rng(11)
    for i in range(100):
        V = int(rng.integers(8, 15))
        p = random_model(V=V, d=int(rng.integers(2, 6)), seed=i, scale=float(rng.uniform(0.1, 3.0)))
        d = step_once(p, rng.integers(0, V, size=int(rng.integers(1, 8))), int(rng.integers(0, V)))
        for vec in (d.p_gen[0], d.p_copy[0], d.p[0], d.attention[0]):
            assert abs(vec.sum() - 1.0) < 1e-6
            assert vec.min() >= 0.0
        assert 0.0 <= d.gamma[0] <= 1.0
        np.testing.assert_allclose(d.p, d.gamma[:, None] * d.p_gen + (1 - d.gamma[:, None]) * d.p_copy)


def test_copy_project_examples():
    assert copy_project([1.0], [7], 10)[7] == 1.0
    out = copy_project([0.4, 0.6], [3, 3], 10)
    assert out[3] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a = rng.dirichlet(np.ones(5))
    ids = rng.permutation(10)[:5]
    out = copy_project(a, ids, 10)
    expected = np.zeros(10)
    for j, v in enumerate(ids):
        expected[v] = a[j]
    np.testing.assert_array_equal(out, expected)


def test_masked_copy_ignores_markers():
    p = random_model(seed=3, mask_markers=True)
    src = [ANNOT_OPEN, 8, ANNOT_SEP, 9, ANNOT_CLOSE]
    d = step_once(p, src)
    assert d.p_copy[0, [ANNOT_OPEN, ANNOT_SEP, ANNOT_CLOSE]].sum() == 0.0
    assert d.p_copy[0].sum() == pytest.approx(1.0)


def test_decode_step_dimension_mismatch(tiny_model):
    enc = encode(tiny_model, [[3, 4]])
    with pytest.raises(ValueError):
        decode_step(tiny_model, enc.init, [BOS], enc, np.zeros((1, 5)))
    with pytest.raises(ValueError):
        decode_step(tiny_model, enc.init, [BOS, BOS], enc, np.zeros((2, 4)))


def test_uniform_two_symbol_model():
    p = init_params(ModelConfig(2, d=3, dropout=0.0), 0)
    p.tensors["E"][:] = 0.0
    p.tensors["out.bias"][:] = 0.0
    p.tensors["att.v"][:] = 0.0
    lp, steps = forward_logprob(p, [0, 1], [1, 0, 1])
    assert lp == pytest.approx(3 * np.log(0.5), abs=1e-12)
    assert all(np.allclose(s.p, 0.5) for s in steps)


def test_logprob_matches_naive_product():
    rng = np.random.default_rng(4)
    for seed in range(20):
        p = random_model(seed=seed, scale=1.0)
        src = rng.integers(3, 12, size=int(rng.integers(1, 6)))
        tgt = list(rng.integers(3, 12, size=int(rng.integers(0, 4)))) + [EOS]
        lp, _ = forward_logprob(p, src, tgt)
        enc = encode(p, src[None])
        state, att, prev, prob = enc.init, initial_attentional(p, 1), BOS, 1.0
        for y in tgt:
            dist, state, att = decode_step(p, state, [prev], enc, att)
            prob *= dist.p[0, y]
            prev = y
        assert lp <= 0.0
        assert abs(lp - np.log(prob)) < 1e-9


def test_clamped_probability_warns():
    p = random_model(seed=1)
    p.tensors["gate.b"][0] = -1e6  # pure copy: tokens absent from the source are impossible
    with pytest.warns(ProbabilityFloorWarning):
        lp, _ = forward_logprob(p, [5, 6], [9, EOS])
    assert np.isfinite(lp)


def test_eval_forward_is_bit_stable(tiny_model):
    src = np.array([[3, 4, 5]])
    ti, to, m = teacher_forcing_arrays([[7, 8]], EOS)
    a = forward_loss(tiny_model, src, ti, to, m)
    b = forward_loss(tiny_model, src, ti, to, m)
    assert a.loss == b.loss and np.array_equal(a.logp, b.logp)


def test_tying_output_projection_moves_with_embedding(tiny_model):
    before = step_once(tiny_model, [3, 4]).p_gen.copy()
    tiny_model.tensors["E"][9] += 1.0
    after = step_once(tiny_model, [3, 4]).p_gen
    assert not np.allclose(before, after)


def grads_for(params, targets, scale=1.0):
    src = np.array([[3, 4, 5], [6, 7, 8]])
    ti, to, m = teacher_forcing_arrays(targets, EOS)
    return backward(params, forward_loss(params, src, ti, to, scale * m))


def test_gradient_linearity(tiny_model):
    g1 = grads_for(tiny_model, [[7, 8], [9]])
    g2 = grads_for(tiny_model, [[7, 8], [9]], scale=2.0)
    for k in g1:
        np.testing.assert_array_equal(g2[k], 2.0 * g1[k])


def test_unused_gate_has_zero_gradient():
    p = random_model(copy=False)
    g = grads_for(p, [[7, 8], [9]])
    assert not g["gate.w"].any() and not g["gate.b"].any()
    assert g["E"].any()


def test_gradient_shapes_cover_every_tensor(tiny_model):
    g = grads_for(tiny_model, [[7], [8, 9]])
    assert list(g) == list(tiny_model.tensors)
    for k, v in g.items():
        assert v.shape == tiny_model[k].shape and np.all(np.isfinite(v))


def test_tied_embedding_gradient_accumulates_all_uses():
    # row 3 is a source token, row 7 a target input/output token, row 11 appears nowhere
    p = random_model()
    src = np.array([[3, 3]])
    ti, to, m = teacher_forcing_arrays([[7]], EOS)
    g = backward(p, forward_loss(p, src, ti, to, m))["E"]
    assert g[3].any() and g[7].any()
    # an unseen row only receives the output-softmax term: tiny but present
    assert np.abs(g[11]).max() < np.abs(g[7]).max()
