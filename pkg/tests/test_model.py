import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from replume import tensor as T
from replume.errors import IdError, PositionError
from replume.model import (
    PRESETS,
    EncoderConfig,
    classifier_logits,
    classify,
    classify_many,
    embed,
    encoder_forward,
    init_params,
    make_batch,
    mlm_forward,
    multi_head_attention,
    param_shapes,
    preset_config,
)
from replume.tensor import Tensor, finite_difference_check
from replume.tokenizer import EncodedSequence, Vocabulary, encode


def _seq(ids, max_len):
    n = len(ids)
    return EncodedSequence(tuple(ids) + (0,) * (max_len - n), (1,) * n + (0,) * (max_len - n), (0,) * max_len)


def _tiny(**kw):
    base = dict(vocab_size=12, hidden_dim=8, num_layers=2, num_heads=2, max_len=8, dropout_rate=0.1)
    return EncoderConfig(**{**base, **kw})


def _zero_embeddings(config):
    params = init_params(config, 0)
    for name in ("embeddings.word", "embeddings.position", "embeddings.segment"):
        params[name] = Tensor(np.zeros(params[name].shape, np.float32))
    return params


# -- config ---------------------------------------------------------------


def test_presets_keep_base_below_large():
    base, large = PRESETS["mini-base"], PRESETS["mini-large"]
    assert large["hidden_dim"] > base["hidden_dim"] and large["num_layers"] > base["num_layers"]


@pytest.mark.parametrize("kw", [dict(hidden_dim=10, num_heads=4), dict(num_layers=0), dict(max_len=2)])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        _tiny(**kw)


def test_ffn_defaults_to_four_d():
    assert preset_config("mini-large", 100).ffn_dim == 512


def test_init_is_seeded_and_shaped():
    config = _tiny()
    a, b = init_params(config, 3), init_params(config, 3)
    assert {k: v.shape for k, v in a.items()} == param_shapes(config)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    w = a["embeddings.word"].data
    assert np.abs(w).max() <= 0.04 + 1e-7 and 0.01 < w.std() < 0.03
    assert not a["classifier.bias"].data.any() and np.all(a["embeddings.norm.gain"].data == 1)


# -- embeddings -----------------------------------------------------------


def test_embed_zero_tables_pre_norm():
    config = _tiny(dropout_rate=0.0)
    params = _zero_embeddings(config)
    batch = make_batch(_seq([2, 5, 3], 8))
    out = embed(batch, params, config).data
    np.testing.assert_array_equal(out, np.zeros_like(out))


def test_embed_same_token_without_positions_is_identical():
    config = _tiny()
    params = init_params(config, 1)
    params["embeddings.position"] = Tensor(np.zeros(params["embeddings.position"].shape, np.float32))
    out = embed(make_batch(_seq([2, 7, 7, 3], 8)), params, config).data[0]
    np.testing.assert_array_equal(out[1], out[2])


def test_embed_hand_sum_before_norm():
    config = EncoderConfig(vocab_size=6, hidden_dim=2, num_layers=1, num_heads=1, max_len=3)
    params = _zero_embeddings(config)
    params["embeddings.word"].data[5] = [1, 0]
    params["embeddings.position"].data[1] = [0, 1]
    params["embeddings.segment"].data[0] = [1, 1]
    ids = np.array([[2, 5, 3]])
    pre = (T.take(params["embeddings.word"], ids) + T.getitem(params["embeddings.position"], slice(0, 3))
           + T.take(params["embeddings.segment"], np.zeros_like(ids))).data
    # [1,0] + [0,1] + [1,1]
    np.testing.assert_array_equal(pre[0, 1], [2, 2])
    # an equal-valued row normalises to zero; position 0 sees only the segment row
    out = embed(make_batch(_seq([2, 5, 3], 3)), params, config).data[0]
    np.testing.assert_allclose(out[1], [0, 0], atol=1e-6)
    params["embeddings.position"].data[1] = [0, 3]
    out = embed(make_batch(_seq([2, 5, 3], 3)), params, config).data[0]
    np.testing.assert_allclose(out[1], [-1, 1], atol=1e-4)  # pre-norm [2, 4]


def test_embed_rejects_bad_id():
    config = _tiny()
    with pytest.raises(IdError):
        embed(make_batch(_seq([2, 12, 3], 8)), init_params(config), config)


# -- attention ------------------------------------------------------------


def _attn_params(d, wq=None, wk=None, wv=None, wo=None):
    eye = np.eye(d, dtype=np.float32)
    p = {}
    for name, w in zip(("query", "key", "value", "output"), (wq, wk, wv, wo)):
        p[f"a.{name}.weight"] = Tensor(eye if w is None else np.asarray(w, np.float32))
        p[f"a.{name}.bias"] = Tensor(np.zeros(d, np.float32))
    return p


def test_zero_queries_attend_uniformly():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 4, 4)).astype(np.float32))
    params = _attn_params(4, wq=np.zeros((4, 4)))
    mask = np.array([[1, 1, 1, 0]])
    out, w = multi_head_attention(x, mask, params, "a.", 2, return_weights=True)
    np.testing.assert_allclose(w.data[0, :, :, :3], 1 / 3, atol=1e-6)
    np.testing.assert_allclose(w.data[0, :, :, 3], 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data[0], np.broadcast_to(x.data[0, :3].mean(axis=0), (4, 4)), atol=1e-6)


def test_single_head_hand_case():
    x = Tensor(np.array([[[0.0], [1.0]]], np.float32))
    # query of every row is [1]: bias the query projection to a constant
    params = _attn_params(1, wq=[[0.0]])
    params["a.query.bias"] = Tensor(np.array([1.0], np.float32))
    out, w = multi_head_attention(x, np.array([[1, 1]]), params, "a.", 1, return_weights=True)
    np.testing.assert_allclose(w.data[0, 0, 0], [0.2689, 0.7311], atol=1e-4)
    assert out.data[0, 0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_only_first_position_visible():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 5, 4)).astype(np.float32))
    _, w = multi_head_attention(x, np.array([[1, 0, 0, 0, 0]]), _attn_params(4), "a.", 2, return_weights=True)
    np.testing.assert_allclose(w.data[..., 0], 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_attention_rows_are_distributions(seed, n_valid):
    config = _tiny()
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 6, 8)).astype(np.float32))
    mask = np.zeros((2, 6), int)
    mask[:, :n_valid] = 1
    _, w = multi_head_attention(x, mask, params, "layers.0.attn.", 2, return_weights=True)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(w.data[..., :n_valid].sum(-1), 1.0, atol=1e-6)


# -- encoder --------------------------------------------------------------


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_encoder_shape_contract(preset):
    config = preset_config(preset, 40, max_len=10)
    seq = _seq([2, 7, 8, 3], 10)
    assert encoder_forward(make_batch(seq), init_params(config), config).shape == (1, 10, config.hidden_dim)


def test_eval_mode_is_deterministic():
    config = _tiny()
    params = init_params(config, 2)
    batch = make_batch(_seq([2, 5, 6, 7, 3], 8))
    a = encoder_forward(batch, params, config).data
    b = encoder_forward(batch, params, config).data
    assert np.array_equal(a, b)


def test_one_layer_changes_embedding():
    config = _tiny(num_layers=1)
    params = init_params(config, 3)
    batch = make_batch(_seq([2, 5, 6, 3], 8))
    assert not np.allclose(encoder_forward(batch, params, config).data, embed(batch, params, config).data)


# -- classifier -----------------------------------------------------------


def test_zero_classifier_is_uniform():
    config = _tiny()
    params = init_params(config, 4)
    params["classifier.weight"] = Tensor(np.zeros((3, 8), np.float32))
    np.testing.assert_allclose(classify(_seq([2, 5, 3], 8), params, config), 1 / 3, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(5, 11), min_size=0, max_size=6), st.floats(-5, 5))
def test_classify_distribution_and_argmax(seed, body, shift):
    config = _tiny()
    params = init_params(config, seed)
    params["classifier.weight"] = Tensor(np.random.default_rng(seed).normal(size=(3, 8)).astype(np.float32))
    seq = _seq([2, *body, 3], 8)
    p = classify(seq, params, config)
    logits = classifier_logits(make_batch(seq), params, config).data[0]
    assert abs(p.sum() - 1) < 1e-6 and np.argmax(p) == np.argmax(logits)
    params["classifier.bias"] = Tensor(params["classifier.bias"].data + np.float32(shift))
    assert np.argmax(classify(seq, params, config)) == np.argmax(p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 11), min_size=4, max_size=4))
def test_padding_isolation(seed, pad_ids):
    config = _tiny()
    params = init_params(config, seed)
    params["classifier.weight"] = Tensor(np.random.default_rng(seed).normal(size=(3, 8)).astype(np.float32))
    seq = _seq([2, 6, 3], 8)
    other = EncodedSequence(seq.ids[:3] + (0,) + tuple(pad_ids), seq.attention_mask, seq.segment_ids)
    a, b = classify(seq, params, config), classify(other, params, config)
    assert np.max(np.abs(a - b)) < 1e-6


def test_classify_many_matches_single():
    config = _tiny()
    params = init_params(config, 5)
    vocab = Vocabulary.from_learned(list("abcdefg"))
    seqs = [encode(t, vocab, 8) for t in ["a b", "c d e f", "g", "a a a a a a a"]]
    many = classify_many(seqs, params, config, batch_size=3)
    single = np.stack([classify(s, params, config) for s in seqs])
    np.testing.assert_allclose(many, single, atol=1e-6)


# -- MLM head -------------------------------------------------------------


def test_mlm_shape_and_zero_projection():
    config = _tiny()
    params = init_params(config, 6)
    seq = _seq([2, 5, 6, 7, 3], 8)
    assert mlm_forward(seq, [1, 3], params, config).shape == (2, 12)
    params["mlm.weight"] = Tensor(np.zeros((12, 8), np.float32))
    logits = mlm_forward(seq, [1, 2], params, config)
    assert not logits.any()
    np.testing.assert_allclose(T.softmax(Tensor(logits)).data, 1 / 12, atol=1e-7)


@pytest.mark.parametrize("positions", [[5], [], [7]])
def test_mlm_rejects_padding_positions(positions):
    config = _tiny()
    with pytest.raises(PositionError):
        mlm_forward(_seq([2, 5, 6, 3], 8), positions, init_params(config), config)


# -- gradients ------------------------------------------------------------


def test_full_pipeline_gradient_matches_finite_differences():
    config = preset_config("mini-base", 12, hidden_dim=8, num_layers=2, num_heads=2, max_len=6, dropout_rate=0.0)
    params = init_params(config, 7)
    rng = np.random.default_rng(7)
    for k in params:  # larger weights than init so every path carries signal
        params[k] = Tensor(params[k].data + rng.normal(scale=0.3, size=params[k].shape).astype(np.float32))
    batch = make_batch([_seq([2, 5, 6, 7, 8, 3], 6), _seq([2, 9, 10, 3], 6)])
    names = sorted(k for k in params if not k.startswith("mlm."))

    def loss_fn(*tensors):
        p = dict(zip(names, tensors))
        return T.weighted_cross_entropy(classifier_logits(batch, p, config), [0, 2], [1.0, 0.5, 2.5])

    assert finite_difference_check(loss_fn, [params[k] for k in names], h=1e-3) < 1e-2


def test_default_dropout_and_math_is_float32():
    config = preset_config("mini-base", 20)
    assert config.dropout_rate == 0.1
    out = encoder_forward(make_batch(_seq([2, 5, 3], 64)), init_params(config), config)
    assert out.dtype == np.float32
    assert math.isfinite(float(out.data.sum()))
