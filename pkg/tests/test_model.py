import math

import numpy as np
import pytest

from cyclerec.data import TrainingExample
from cyclerec.model import (
    BatchSpec,
    DivergenceError,
    ModelConfig,
    adam_step,
    extract_features,
    extract_features_batch,
    features_all_positions,
    grow_vocabulary,
    init_model,
    load_model,
    loss_and_gradients,
    predict_logits,
    save_model,
    softmax,
    zero_gradients,
)

SMALL = ModelConfig(embed_dim=8, block_count=1, attention_heads=1, max_seq_len=10, dtype="float64")


def small_model(item_count=12, seed=3, **overrides):
    cfg = ModelConfig(**{**SMALL.__dict__, **overrides})
    return init_model(cfg, item_count, seed=seed)


def states_equal(a, b):
    return (
        a.step == b.step
        and a.item_count == b.item_count
        and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        and all(np.array_equal(a.adam_m[k], b.adam_m[k]) for k in a.adam_m)
        and all(np.array_equal(a.adam_v[k], b.adam_v[k]) for k in a.adam_v)
    )


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------


def test_init_deterministic():
    assert states_equal(small_model(seed=5), small_model(seed=5))


def test_init_shapes():
    m = small_model(item_count=5)
    assert m.params["item_emb"].shape == (5, 8)
    assert m.params["pos_emb"].shape == (10, 8)
    assert m.params["blocks.0.attn.wq"].shape == (8, 8)
    assert set(m.adam_m) == set(m.params)


def test_init_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=6, attention_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(dtype="float16")
    with pytest.raises(ValueError):
        init_model(SMALL, item_count=0)


def test_zero_dropout_train_matches_eval():
    m = small_model()
    f_train = extract_features(m, [1, 2, 3], train_mode=True, dropout_seed=4)
    f_eval = extract_features(m, [1, 2, 3], train_mode=False)
    np.testing.assert_array_equal(f_train, f_eval)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform_pair():
    np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_large_logits_no_overflow():
    p = softmax(np.array([1000.0, 0.0]))
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(p).all()


def test_softmax_log_ratios():
    p = softmax(np.log(np.array([1.0, 2.0, 3.0])))
    np.testing.assert_allclose(p, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_shift_invariance_and_normalization():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = rng.normal(size=rng.integers(2, 30))
        p = softmax(z)
        q = softmax(z + 13.7)
        assert abs(p.sum() - 1.0) < 1e-6
        np.testing.assert_allclose(p, q, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        softmax(np.array([np.nan, 0.0]))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def test_feature_of_length_one_prefix_uses_item_and_position_zero():
    m = small_model()
    f1 = extract_features(m, [4])
    per_pos = features_all_positions(m, [4, 7, 2])
    np.testing.assert_allclose(f1, per_pos[0], atol=1e-10)


def test_causality_prefix_features_match_within_longer_sequence():
    m = small_model(item_count=12, seed=8)
    seq = [3, 1, 4, 1, 5, 9, 2, 6]
    per_pos = features_all_positions(m, seq)
    for j in range(1, len(seq)):
        np.testing.assert_allclose(
            extract_features(m, seq[:j]), per_pos[j - 1], atol=1e-10
        )


def test_feature_independent_of_batch_padding():
    m = small_model(seed=2)
    single = extract_features(m, [5, 6])
    batch = extract_features_batch(m, [(5, 6), (1, 2, 3, 4, 5, 6, 7), (9,)])
    np.testing.assert_allclose(single, batch[0], atol=1e-12)


def test_dropout_deterministic_per_seed():
    m = small_model(dropout_rate=0.4)
    a = extract_features(m, [1, 2, 3], train_mode=True, dropout_seed=11)
    b = extract_features(m, [1, 2, 3], train_mode=True, dropout_seed=11)
    c = extract_features(m, [1, 2, 3], train_mode=True, dropout_seed=12)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_prefix_index_out_of_range_errors():
    m = small_model(item_count=5)
    with pytest.raises(ValueError, match="out of range"):
        extract_features(m, [7])


def test_prefix_longer_than_max_seq_len_keeps_most_recent():
    m = small_model(max_seq_len=4)
    long_feat = extract_features(m, [1, 2, 3, 4, 5, 6])
    trimmed = extract_features(m, [3, 4, 5, 6])
    np.testing.assert_allclose(long_feat, trimmed, atol=1e-12)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def test_logits_argmax_for_orthogonal_embeddings():
    m = small_model(item_count=8)
    emb = np.zeros((8, 8))
    np.fill_diagonal(emb, 1.0)
    m.params["item_emb"] = emb
    logits = predict_logits(m, emb[3])
    assert int(np.argmax(logits)) == 3


def test_logits_item_range_restriction():
    m = small_model(item_count=9)
    f = extract_features(m, [1])
    assert predict_logits(m, f, item_range=6).shape == (6,)
    with pytest.raises(ValueError):
        predict_logits(m, f, item_range=10)


def test_zero_feature_gives_uniform_softmax():
    m = small_model(item_count=7)
    logits = predict_logits(m, np.zeros(8))
    np.testing.assert_allclose(logits, 0.0)
    np.testing.assert_allclose(softmax(logits), np.full(7, 1 / 7))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _fd_check(model, spec, rng, samples=25, h=1e-5, tol=1e-4):
    _, grads = loss_and_gradients(model, spec)
    worst = 0.0
    names = sorted(model.params)
    for _ in range(samples):
        name = names[rng.integers(0, len(names))]
        idx = tuple(int(rng.integers(0, s)) for s in model.params[name].shape)
        orig = model.params[name][idx]
        model.params[name][idx] = orig + h
        up, _ = loss_and_gradients(model, spec)
        model.params[name][idx] = orig - h
        down, _ = loss_and_gradients(model, spec)
        model.params[name][idx] = orig
        fd = (up.total - down.total) / (2 * h)
        an = grads[name][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert worst <= tol, f"finite-difference mismatch: {worst:.3e}"


def test_gradients_match_finite_differences_eval_mode():
    rng = np.random.default_rng(0)
    m = small_model(seed=1)
    spec = BatchSpec(
        ce_examples=[TrainingExample((0, 3, 5), 7), TrainingExample((1,), 2)],
    )
    _fd_check(m, spec, rng)


def test_gradients_match_finite_differences_with_dropout_and_kd():
    rng = np.random.default_rng(1)
    m = small_model(seed=2, block_count=2, attention_heads=2, dropout_rate=0.3)
    teacher = rng.dirichlet(np.ones(9), size=2)
    spec = BatchSpec(
        ce_examples=[TrainingExample((0, 3, 5), 7), TrainingExample((2, 4, 6, 8), 11)],
        kd_examples=[TrainingExample((3, 1), 4), TrainingExample((5,), 0)],
        kd_teacher_probs=teacher,
        kd_item_range=9,
        kd_weight=0.5,
        train_mode=True,
        dropout_seed=42,
    )
    _fd_check(m, spec, rng)


def test_gradients_match_finite_differences_with_ewc():
    rng = np.random.default_rng(2)
    m = small_model(seed=4)
    anchor = {k: v + 0.01 for k, v in m.params.items()}
    fisher = {k: np.abs(rng.normal(size=v.shape)) for k, v in m.params.items()}
    spec = BatchSpec(
        ce_examples=[TrainingExample((0, 1), 3)],
        ewc_anchor=anchor,
        ewc_fisher=fisher,
        ewc_weight=2.5,
    )
    _fd_check(m, spec, rng)


def test_empty_recipe_gives_zero_gradients():
    m = small_model()
    breakdown, grads = loss_and_gradients(m, BatchSpec())
    assert breakdown.total == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_duplicated_example_doubles_contribution():
    m = small_model()
    a = TrainingExample((0, 1), 3)
    b = TrainingExample((2,), 5)
    _, g_ab = loss_and_gradients(m, BatchSpec(ce_examples=[a, b]))
    _, g_abb = loss_and_gradients(m, BatchSpec(ce_examples=[a, b, b]))
    _, g_a = loss_and_gradients(m, BatchSpec(ce_examples=[a]))
    _, g_b = loss_and_gradients(m, BatchSpec(ce_examples=[b]))
    for name in g_ab:
        np.testing.assert_allclose(g_abb[name], (2 * g_a[name] + 4 * g_b[name]) / 6, atol=1e-12)


def test_nonfinite_loss_raises_divergence():
    m = small_model()
    m.params["item_emb"][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        loss_and_gradients(m, BatchSpec(ce_examples=[TrainingExample((0,), 1)]))


def test_ce_target_out_of_range_errors():
    m = small_model(item_count=4)
    with pytest.raises(ValueError):
        loss_and_gradients(m, BatchSpec(ce_examples=[TrainingExample((0,), 9)]))


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradients_leave_parameters_unchanged():
    m = small_model()
    before = {k: v.copy() for k, v in m.params.items()}
    adam_step(m, zero_gradients(m))
    assert m.step == 1
    for name in before:
        np.testing.assert_array_equal(m.params[name], before[name])


def test_adam_first_step_hand_computed():
    # g=1 from fresh moments: bias-corrected step is -lr/(1+eps) ~ -lr
    m = small_model()
    grads = zero_gradients(m)
    grads["item_emb"][0, 0] = 1.0
    before = m.params["item_emb"][0, 0]
    adam_step(m, grads, lr=0.001)
    delta = m.params["item_emb"][0, 0] - before
    assert delta == pytest.approx(-0.001, rel=1e-6)


def test_adam_deterministic():
    m1, m2 = small_model(seed=6), small_model(seed=6)
    grads = zero_gradients(m1)
    grads["pos_emb"][:] = 0.3
    adam_step(m1, grads)
    adam_step(m2, {k: v.copy() for k, v in grads.items()})
    assert states_equal(m1, m2)


def test_adam_shape_mismatch_errors():
    m = small_model()
    grads = zero_gradients(m)
    grads["pos_emb"] = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step(m, grads)


# ---------------------------------------------------------------------------
# vocabulary growth
# ---------------------------------------------------------------------------


def test_grow_same_size_is_identity():
    m = small_model(item_count=5)
    before = {k: v.copy() for k, v in m.params.items()}
    grow_vocabulary(m, 5, seed=1)
    assert m.item_count == 5
    np.testing.assert_array_equal(m.params["item_emb"], before["item_emb"])


def test_grow_preserves_existing_rows_bit_exactly():
    m = small_model(item_count=5)
    old = m.params["item_emb"].copy()
    grow_vocabulary(m, 8, seed=1)
    assert m.item_count == 8
    assert np.array_equal(m.params["item_emb"][:5], old)
    assert np.all(m.adam_m["item_emb"][5:] == 0)
    assert np.all(np.abs(m.params["item_emb"][5:]) <= 0.01 / math.sqrt(8))


def test_grow_preserves_old_item_logits_bit_exactly():
    m = small_model(item_count=6, seed=9)
    prefix = [0, 2, 4]
    feats_before = extract_features(m, prefix)
    logits_before = predict_logits(m, feats_before, item_range=6)
    grow_vocabulary(m, 10, seed=3)
    feats_after = extract_features(m, prefix)
    logits_after = predict_logits(m, feats_after, item_range=6)
    assert np.array_equal(logits_before, logits_after)


def test_grow_shrink_errors():
    m = small_model(item_count=5)
    with pytest.raises(ValueError):
        grow_vocabulary(m, 4)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = small_model(seed=13, dropout_rate=0.2)
    grads = zero_gradients(m)
    grads["item_emb"][:] = 0.05
    adam_step(m, grads)
    path = tmp_path / "model.npz"
    save_model(m, path)
    loaded = load_model(path)
    assert loaded.config == m.config
    assert states_equal(m, loaded)
    assert all(loaded.params[k].dtype == m.params[k].dtype for k in m.params)


def test_checkpoint_float32_round_trip(tmp_path):
    cfg = ModelConfig(embed_dim=8, block_count=1, max_seq_len=6, dtype="float32")
    m = init_model(cfg, 4, seed=0)
    path = tmp_path / "model32.npz"
    save_model(m, path)
    loaded = load_model(path)
    assert loaded.params["item_emb"].dtype == np.float32
    assert states_equal(m, loaded)


def test_float32_training_step_keeps_dtype():
    cfg = ModelConfig(embed_dim=8, block_count=2, max_seq_len=6, dtype="float32", dropout_rate=0.2)
    m = init_model(cfg, 6, seed=0)
    spec = BatchSpec(ce_examples=[TrainingExample((0, 1), 2)], train_mode=True, dropout_seed=1)
    _, grads = loss_and_gradients(m, spec)
    adam_step(m, grads)
    assert all(g.dtype == np.float32 for g in grads.values())
    assert all(p.dtype == np.float32 for p in m.params.values())
