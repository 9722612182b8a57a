import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from replume.dataset import SynthSpec, TweetRecord, synth_generate
from replume.errors import DegenerateDataError, LabelError, NumericError, PlanError
from replume.model import ModelCheckpoint, init_params, preset_config
from replume.tensor import Tensor
from replume.text import clean_text
from replume.tokenizer import CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID, EncodedSequence, build_vocab
from replume.training import (
    OptimizerState,
    SkipSample,
    TrainPlan,
    adamw_step,
    batch_loss,
    class_weight_vector,
    compute_class_weights,
    fine_tune,
    label_ids,
    linear_schedule,
    mask_for_mlm,
    pretrain_mlm,
)


# -- AdamW ----------------------------------------------------------------


def test_adamw_single_step_hand_value():
    # m_hat = 0.5, v_hat = 0.25 -> Adam step lr * 0.5 / (0.5 + 1e-8); decay lr * wd * 1
    p = {"w": Tensor(np.array([1.0]), dtype=np.float64)}
    adamw_step(p, {"w": np.array([0.5])}, OptimizerState(), lr=1e-3)
    expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8) - 1e-3 * 0.01
    assert p["w"].data[0] == pytest.approx(expected, abs=1e-15)
    assert p["w"].data[0] == pytest.approx(0.99899, abs=1e-9)


def test_adamw_zero_grad_zero_decay_is_identity():
    rng = np.random.default_rng(0)
    p = {"a": Tensor(rng.normal(size=(3, 2))), "b": Tensor(rng.normal(size=4))}
    before = {k: v.data.copy() for k, v in p.items()}
    state = OptimizerState(weight_decay=0.0)
    for _ in range(3):
        adamw_step(p, {k: np.zeros_like(v.data) for k, v in p.items()}, state, lr=1e-2)
    assert all(np.array_equal(before[k], p[k].data) for k in p)
    assert state.t == 3
    assert all(state.m[k].shape == p[k].shape == state.v[k].shape for k in p)


def test_adamw_zero_grad_pure_shrink():
    p = {"w": Tensor(np.array([2.0, -4.0]), dtype=np.float64)}
    adamw_step(p, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.1), lr=0.01)
    np.testing.assert_allclose(p["w"].data, np.array([2.0, -4.0]) * (1 - 0.01 * 0.1), rtol=0, atol=1e-15)


def test_adamw_nan_names_parameter():
    p = {"layers.0.ffn.in.weight": Tensor(np.ones(2))}
    with pytest.raises(NumericError, match="layers.0.ffn.in.weight"):
        adamw_step(p, {"layers.0.ffn.in.weight": np.array([1.0, np.nan])}, OptimizerState(), 1e-3)


# -- schedule -------------------------------------------------------------


@pytest.mark.parametrize("step, expected", [(0, 1e-5), (50, 5e-6), (100, 0.0)])
def test_linear_schedule_examples(step, expected):
    assert linear_schedule(1e-5, step, 100) == pytest.approx(expected, abs=1e-20)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(1, 500))
def test_linear_schedule_non_negative_non_increasing(base, total):
    lrs = [linear_schedule(base, s, total) for s in range(total + 5)]
    assert all(x >= 0 for x in lrs)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# -- class weights --------------------------------------------------------


def test_class_weights_examples():
    w = compute_class_weights({"POSITIVE": 6, "NEUTRAL": 3, "NEGATIVE": 1})
    assert w == pytest.approx({"POSITIVE": 10 / 18, "NEUTRAL": 10 / 9, "NEGATIVE": 10 / 3})
    assert [round(w[c], 4) for c in ("POSITIVE", "NEUTRAL", "NEGATIVE")] == [0.5556, 1.1111, 3.3333]
    assert compute_class_weights({"a": 5, "b": 5, "c": 5}) == {"a": 1.0, "b": 1.0, "c": 1.0}
    two = compute_class_weights({"a": 9, "b": 1})
    assert two == pytest.approx({"a": 10 / 18, "b": 5.0}) and two["b"] > two["a"]


def test_class_weights_zero_count():
    with pytest.raises(DegenerateDataError):
        compute_class_weights({"POSITIVE": 3, "NEUTRAL": 0})


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=5))
def test_class_weights_mean_one_and_anti_monotone(counts):
    labelled = {f"c{i}": n for i, n in enumerate(counts)}
    w = compute_class_weights(labelled)
    total = sum(counts)
    assert abs(sum(n * w[c] for c, n in labelled.items()) / total - 1.0) < 1e-9
    for a in labelled:
        for b in labelled:
            if labelled[a] < labelled[b]:
                assert w[a] > w[b]


# -- plans ----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(epochs=7), dict(batch_size=12), dict(base_lr=2e-3), dict(base_lr=1e-8)])
def test_plan_grid_guard(kw):
    with pytest.raises(PlanError):
        TrainPlan(**kw)
    TrainPlan(**kw, allow_off_grid=True)


def test_plan_defaults_on_grid():
    plan = TrainPlan()
    assert (plan.epochs, plan.batch_size, plan.base_lr, plan.class_weighting) == (20, 32, 1e-3, True)
    TrainPlan(epochs=0)


# -- MLM masking ----------------------------------------------------------


def _seq(n_content, max_len=None, vocab=50):
    ids = [CLS_ID, *range(NUM_SPECIALS, NUM_SPECIALS + n_content), SEP_ID]
    max_len = max_len or len(ids)
    pad = max_len - len(ids)
    return EncodedSequence(tuple(ids + [PAD_ID] * pad), (1,) * len(ids) + (0,) * pad, (0,) * max_len)


def test_mask_twenty_tokens_selects_three():
    assert len(mask_for_mlm(_seq(20), np.random.default_rng(0), 50).positions) == 3


def test_mask_one_token_selects_one():
    assert mask_for_mlm(_seq(1, 8), np.random.default_rng(0), 50).positions == (1,)


def test_mask_nothing_maskable():
    with pytest.raises(SkipSample):
        mask_for_mlm(_seq(0, 6), np.random.default_rng(0), 50)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10), st.integers(0, 2**32 - 1))
def test_mask_count_and_exclusions(n, extra_pad, seed):
    seq = _seq(n, n + 2 + extra_pad, vocab=n + 10)
    sample = mask_for_mlm(seq, np.random.default_rng(seed), n + 10)
    assert len(sample.positions) == max(1, math.floor(0.15 * n + 0.5))
    assert len(set(sample.positions)) == len(sample.positions)
    for pos in sample.positions:
        assert seq.ids[pos] not in (CLS_ID, SEP_ID, PAD_ID)
    assert sample.original_ids == tuple(seq.ids[p] for p in sample.positions)
    untouched = set(range(len(seq.ids))) - set(sample.positions)
    assert all(sample.sequence.ids[i] == seq.ids[i] for i in untouched)


def test_mask_corruption_split_is_80_10_10():
    rng = np.random.default_rng(1)
    seq = _seq(40, vocab=2000)
    kinds = Counter()
    for _ in range(4000):
        s = mask_for_mlm(seq, rng, 2000)
        for pos, orig in zip(s.positions, s.original_ids):
            new = s.sequence.ids[pos]
            kinds["mask" if new == MASK_ID else "same" if new == orig else "random"] += 1
            assert new == MASK_ID or new >= NUM_SPECIALS
    total = sum(kinds.values())
    assert kinds["mask"] / total == pytest.approx(0.8, abs=0.01)
    assert kinds["random"] / total == pytest.approx(0.1, abs=0.01)  # a random draw can equal the original
    assert kinds["same"] / total == pytest.approx(0.1, abs=0.01)


# -- MLM pretraining ------------------------------------------------------


CORPUS = [f"the {w} car is very {a} today" for w in ("red", "blue", "green") for a in ("fast", "nice")] * 4


def _mini(vocab, **kw):
    return preset_config("mini-base", len(vocab), max_len=16, **{"hidden_dim": 16, "num_layers": 1, "num_heads": 2, **kw})


def test_pretrain_zero_epochs_returns_init():
    vocab = build_vocab(CORPUS, 60, 1)
    config = _mini(vocab)
    ckpt, history = pretrain_mlm(CORPUS, config, TrainPlan(epochs=0, batch_size=8, seed=3), vocab)
    assert history == []
    fresh = pretrain_mlm(CORPUS, config, TrainPlan(epochs=0, batch_size=8, seed=3), vocab)[0]
    assert all(np.array_equal(ckpt.params[k].data, fresh.params[k].data) for k in ckpt.params)


def test_pretrain_is_deterministic_and_learns():
    vocab = build_vocab(CORPUS, 60, 1)
    config = _mini(vocab)
    plan = TrainPlan(epochs=15, batch_size=8, base_lr=1e-3, seed=4, allow_off_grid=True)
    a_ckpt, a = pretrain_mlm(CORPUS, config, plan, vocab)
    b_ckpt, b = pretrain_mlm(CORPUS, config, plan, vocab)
    assert a == b
    assert all(np.array_equal(a_ckpt.params[k].data, b_ckpt.params[k].data) for k in a_ckpt.params)
    assert a[-1] < a[0]


# -- fine-tuning ----------------------------------------------------------


def _rec(i, label, text="good"):
    return TweetRecord(f"r{i}", "BMW", "automotive", "EN", text, label)


def test_label_ids_rejects_unknown():
    with pytest.raises(LabelError):
        label_ids([_rec(0, "POSITIVE"), _rec(1, "UNRELATED")])


def test_weighting_changes_loss_on_imbalanced_batch():
    logits = Tensor(np.array([[2.0, 0.0, -1.0], [1.5, 0.5, 0.0], [0.0, 0.0, 0.0], [0.3, 0.2, 0.9]]))
    targets = np.array([0, 0, 1, 2])
    w = class_weight_vector(targets)
    np.testing.assert_allclose(w, [4 / 6, 4 / 3, 4 / 3])
    weighted = batch_loss(logits, targets, w, "softmax").item()
    plain = batch_loss(logits, targets, None, "softmax").item()
    assert weighted != plain
    assert batch_loss(logits, targets, w, "log_softmax").item() == pytest.approx(weighted, abs=1e-12)


def _separable(n=240, seed=0):
    spec = SynthSpec(counts={"EN": {"POSITIVE": n // 2, "NEUTRAL": n // 3, "NEGATIVE": n - n // 2 - n // 3}},
                     signal_rate=1.0, cue_words=0)
    split = synth_generate(spec, seed=seed)
    return split.train + split.test


def test_fine_tune_zero_epochs_is_bitwise_unchanged():
    recs = _separable(30)
    vocab = build_vocab([clean_text(r.text) for r in recs], 200)
    config = preset_config("mini-base", len(vocab), max_len=32)
    start = ModelCheckpoint(config, init_params(config, 0), vocab)
    out, history = fine_tune(recs, start, TrainPlan(epochs=0))
    assert history == []
    assert all(out.params[k].data.tobytes() == start.params[k].data.tobytes() for k in start.params)


def test_fine_tune_reaches_high_train_accuracy():
    recs = _separable(240)
    vocab = build_vocab([clean_text(r.text) for r in recs], 600)
    config = preset_config("mini-base", len(vocab), max_len=32)
    start = ModelCheckpoint(config, init_params(config, 1), vocab)
    epochs_seen = []
    ckpt, history = fine_tune(recs, start, TrainPlan(epochs=20, batch_size=32, base_lr=1e-3, seed=1),
                              on_epoch=epochs_seen.append)
    assert len(history) == 20 and epochs_seen == history
    assert history[-1]["train_accuracy"] >= 0.95
    assert history[-1]["loss"] < history[0]["loss"]
    for k in start.params:
        moved = not np.array_equal(ckpt.params[k].data, start.params[k].data)
        assert moved != k.startswith("mlm."), k


def test_fine_tune_empty_set():
    vocab = build_vocab(["a b"], 10, 1)
    config = preset_config("mini-base", len(vocab), max_len=8)
    with pytest.raises(DegenerateDataError):
        fine_tune([], ModelCheckpoint(config, init_params(config), vocab), TrainPlan())


def test_fine_tune_bitwise_reproducible():
    recs = _separable(60, seed=2)
    vocab = build_vocab([clean_text(r.text) for r in recs], 300)
    config = preset_config("mini-base", len(vocab), max_len=32, hidden_dim=16, num_heads=2)
    plan = TrainPlan(epochs=5, batch_size=16, seed=9)
    runs = [fine_tune(recs, ModelCheckpoint(config, init_params(config, 5), vocab), plan) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    assert all(runs[0][0].params[k].data.tobytes() == runs[1][0].params[k].data.tobytes() for k in runs[0][0].params)


def test_float32_training_math():
    recs = _separable(12)
    vocab = build_vocab([clean_text(r.text) for r in recs], 100)
    config = preset_config("mini-base", len(vocab), max_len=24, hidden_dim=8, num_heads=2)
    ckpt, _ = fine_tune(recs, ModelCheckpoint(config, init_params(config), vocab), TrainPlan(epochs=5, batch_size=4))
    assert all(p.dtype == np.float32 for p in ckpt.params.values())
    assert all(np.isfinite(p.data).all() for p in ckpt.params.values())
