import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aacn import afc
from aacn import nn_core as nn


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# -- normalization and pooling ------------------------------------------------------

def test_normalize_examples():
    np.testing.assert_array_equal(afc.normalize_attention(np.full((3, 2), 0.4)), np.ones((3, 2)))
    m = np.array([[2.0, 1.0], [0.5, 0.0]])
    np.testing.assert_array_equal(afc.normalize_attention(m), m / 2)
    np.testing.assert_array_equal(afc.normalize_attention(np.zeros((2, 2))), np.zeros((2, 2)))


def test_pool_examples(rng):
    F = rng.normal(size=(8, 4, 3))
    np.testing.assert_allclose(afc.mask_and_pool(F, np.ones((4, 3))), F.mean(axis=(1, 2)), rtol=1e-12)
    assert not afc.mask_and_pool(F, np.zeros((4, 3))).any()
    m = np.zeros((4, 3))
    m[2, 1] = 1.0
    np.testing.assert_allclose(afc.mask_and_pool(F, m), F[:, 2, 1] / 12, rtol=1e-14)
    with pytest.raises(ValueError):
        afc.mask_and_pool(F, np.ones((3, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_pool_linear_in_features(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    F1, F2 = rng.normal(size=(2, 5, 4, 4))
    m = afc.normalize_attention(rng.random((4, 4)))
    lhs = afc.mask_and_pool(alpha * F1 + beta * F2, m)
    rhs = alpha * afc.mask_and_pool(F1, m) + beta * afc.mask_and_pool(F2, m)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pool_ignores_unattended_cells(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(5, 6, 4))
    m = rng.random((6, 4)) * (rng.random((6, 4)) > 0.5)
    m_norm = afc.normalize_attention(m)
    G = np.where(m_norm == 0, 0.0, F)
    assert np.array_equal(afc.mask_and_pool(F, m_norm), afc.mask_and_pool(G, m_norm))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(6, 5, 4))
    maps = rng.random((14, 5, 4))
    a = afc.align_features(F, maps).aligned
    b = afc.align_features(F, lam * maps).aligned
    assert rel_err(b, a) < 1e-6


# -- alignment ----------------------------------------------------------------------

def test_aligned_dimension(rng):
    parts = afc.align_features(rng.normal(size=(256, 6, 3)), rng.random((14, 6, 3)))
    assert parts.aligned.shape == (3584,)
    assert parts.features.shape == (14, 256)


def test_all_ones_gives_stacked_global_pool(rng):
    F = rng.normal(size=(256, 6, 3))
    fa = afc.align_features(F, np.ones((14, 6, 3))).aligned
    assert rel_err(fa, np.tile(F.mean(axis=(1, 2)), 14)) < 1e-12


def test_permuting_maps_permutes_blocks(rng):
    F = rng.normal(size=(4, 5, 5))
    maps = rng.random((14, 5, 5))
    swapped = maps.copy()
    swapped[[2, 9]] = maps[[9, 2]]
    a = afc.align_features(F, maps).features
    b = afc.align_features(F, swapped).features
    np.testing.assert_array_equal(b[[2, 9]], a[[9, 2]])
    np.testing.assert_array_equal(np.delete(b, [2, 9], 0), np.delete(a, [2, 9], 0))


def test_visibility_from_raw_maps(rng):
    maps = rng.random((14, 4, 4)) * 0.5
    parts = afc.align_features(rng.normal(size=(3, 4, 4)), maps)
    np.testing.assert_allclose(parts.visibility, maps.sum(axis=(1, 2)))
    assert parts.cells == 16


def test_wrong_part_count(rng):
    with pytest.raises(ValueError):
        afc.align_features(rng.normal(size=(3, 4, 4)), rng.random((13, 4, 4)))


def test_batch_matches_single(rng):
    F = rng.normal(size=(3, 8, 6, 4))
    maps = rng.random((3, 14, 6, 4))
    maps[1, 5] = 0.0
    fa, vis = afc.align_batch(F, maps)
    for i in range(3):
        one = afc.align_features(F[i], maps[i])
        np.testing.assert_allclose(fa[i], one.aligned, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(vis[i], one.visibility / one.cells)
    np.testing.assert_allclose(afc.global_pool_batch(F), F.mean(axis=(2, 3)))


def test_align_tensor_matches_batch(rng):
    F = rng.normal(size=(2, 3, 4, 5))
    maps = rng.random((2, 14, 4, 5))
    fa, vis = afc.align_tensor(nn.Tensor(F), maps)
    ref_fa, ref_vis = afc.align_batch(F, maps)
    np.testing.assert_allclose(fa.data, ref_fa, rtol=1e-12)
    np.testing.assert_allclose(vis, ref_vis)


# -- composition ----------------------------------------------------------------------

def small_head(seed=0):
    return afc.CompositionHead(channels=256, seed=seed)


def test_output_dimension(rng):
    head = small_head()
    parts = afc.align_features(rng.normal(size=(256, 4, 3)), rng.random((14, 4, 3)))
    assert afc.compose(parts, head).shape == (1024,)
    out, w = head.embed(rng.random((5, 14)), rng.normal(size=(5, 3584)))
    assert out.shape == (5, 1024) and w.shape == (5, 14)


def test_identity_head_selects_part_one(rng):
    head = small_head()
    head.params["weight_fc.w"].data[:] = 0.0
    head.params["weight_fc.b"].data[:] = 800.0   # sigmoid saturates to exactly 1
    fuse = np.zeros((1024, 3584))
    fuse[np.arange(256), np.arange(256)] = 1.0
    head.params["fuse.w"].data = fuse
    parts = afc.align_features(rng.normal(size=(256, 4, 3)), rng.random((14, 4, 3)))
    out = afc.compose(parts, head)
    np.testing.assert_array_equal(out[:256], parts.features[0])
    assert not out[256:].any()


def test_zero_inputs_give_half_weights():
    head = small_head()
    head.params["weight_fc.b"].data[:] = 0.0
    _, w = head.embed(np.zeros((1, 14)), np.zeros((1, 3584)))
    np.testing.assert_array_equal(w, 0.5)


def test_zero_weight_part_is_ignored(rng):
    head = small_head()
    head.params["weight_fc.w"].data[:] = 0.0
    head.params["weight_fc.b"].data[:] = 1.0
    head.params["weight_fc.b"].data[6] = -800.0   # w_6 == 0 exactly
    parts = afc.align_features(rng.normal(size=(256, 4, 3)), rng.random((14, 4, 3)))
    before = afc.compose(parts, head)
    parts.features[6] *= 2.0
    np.testing.assert_array_equal(afc.compose(parts, head), before)


def test_input_standardization(rng):
    head = afc.CompositionHead(channels=2, parts=14, out_dim=3)
    vis, fa = rng.random((6, 14)), rng.normal(size=(6, 28))
    head.fit_input_stats(vis, fa)
    x = np.concatenate([vis, fa], axis=1)
    np.testing.assert_allclose(head.in_mean, x.mean(0))
    z = (x - head.in_mean) * head.in_scale
    np.testing.assert_allclose(z[:, :14].var(0), 1.0)
    # the aligned block as a whole weighs like one visibility score
    assert z[:, 14:].var(0).sum() == pytest.approx(1.0)


def test_untrained_head_weights_are_half(rng):
    head = small_head()
    _, w = head.embed(rng.random((3, 14)), rng.normal(size=(3, 3584)))
    np.testing.assert_array_equal(w, 0.5)


def test_state_dict_round_trip(rng):
    head = afc.CompositionHead(channels=4, parts=14, out_dim=8, seed=3)
    head.fit_input_stats(rng.random((5, 14)), rng.normal(size=(5, 56)))
    clone = afc.CompositionHead.from_state_dict(head.state_dict())
    vis, fa = rng.random((2, 14)), rng.normal(size=(2, 56))
    assert np.array_equal(clone.embed(vis, fa)[0], head.embed(vis, fa)[0])


def test_forward_checks_width(rng):
    with pytest.raises(ValueError):
        small_head().forward(np.zeros((1, 14)), np.zeros((1, 100)))


# -- training ---------------------------------------------------------------------------

def toy_set(rng, ids=6, per=3, channels=4):
    base = rng.normal(size=(ids, 14 * channels))
    fa = np.repeat(base, per, axis=0) + 0.3 * rng.normal(size=(ids * per, 14 * channels))
    vis = rng.random((ids * per, 14))
    labels = np.repeat([f"id{i}" for i in range(ids)], per)
    return vis, fa, labels


def test_contrastive_loss_values():
    emb = nn.Tensor(np.array([[0.0, 0.0], [0.0, 0.5], [3.0, 0.0]]))
    # positives: d^2 = 0.25; negatives: d = 3 and sqrt(9.25), both beyond the margin
    assert afc.contrastive_loss(emb, ["a", "a", "b"], 1.0).item() == pytest.approx(0.25)
    emb = nn.Tensor(np.array([[0.0], [0.0], [0.5]]))
    # negatives at d = 0.5: hinge (1 - 0.5)^2 each
    assert afc.contrastive_loss(emb, ["a", "a", "b"], 1.0).item() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        afc.contrastive_loss(emb, ["a", "a", "a"])


def test_training_reduces_loss(rng):
    vis, fa, labels = toy_set(rng)
    head = afc.CompositionHead(channels=4, parts=14, out_dim=16, seed=1)
    head.fit_input_stats(vis, fa)
    before = afc.composition_loss(vis, fa, labels, head)
    hist = afc.train_composition(vis, fa, labels, head, afc.CompositionTrainConfig(epochs=20, lr=0.02, seed=1))
    assert afc.composition_loss(vis, fa, labels, head) < before
    assert len(hist) == 20


def test_lr_zero_leaves_head(rng):
    vis, fa, labels = toy_set(rng)
    head = afc.CompositionHead(channels=4, parts=14, out_dim=16, seed=1)
    snap = {k: v.copy() for k, v in head.state_dict().items()}
    afc.train_composition(vis, fa, labels, head, afc.CompositionTrainConfig(epochs=3, lr=0.0, weight_lr=0.0))
    for k, v in head.state_dict().items():
        assert np.array_equal(v, snap[k])


def test_training_deterministic(rng):
    vis, fa, labels = toy_set(rng)
    outs = []
    for _ in range(2):
        head = afc.CompositionHead(channels=4, parts=14, out_dim=16, seed=2)
        afc.train_composition(vis, fa, labels, head, afc.CompositionTrainConfig(epochs=3, lr=0.02, seed=5,
                                                                              ids_per_batch=4))
        outs.append(head.state_dict()["fuse.w"])
    assert np.array_equal(*outs)


def test_training_input_errors(rng):
    vis, fa, labels = toy_set(rng)
    head = afc.CompositionHead(channels=4, parts=14, out_dim=16)
    with pytest.raises(ValueError):
        afc.train_composition(vis, fa, np.array(["x"] * len(labels)), head)
    lone = labels.copy()
    lone[0] = "solo"
    with pytest.raises(ValueError):
        afc.train_composition(vis, fa, lone, head)


def test_joint_training_runs(rng):
    gcn = afc.ToyGcn(in_channels=3, channels=4, hidden=4, seed=0)
    images = rng.random((6, 3, 6, 4))
    maps = rng.random((6, 14, 6, 4))
    labels = np.repeat(["a", "b", "c"], 2)
    head = afc.CompositionHead(channels=4, parts=14, out_dim=8)
    hist = afc.train_joint(images, maps, labels, gcn, head, afc.CompositionTrainConfig(epochs=3, lr=0.01))
    assert len(hist) == 3 and np.isfinite(hist).all()
    assert gcn.forward(images).shape == (6, 4, 6, 4)
