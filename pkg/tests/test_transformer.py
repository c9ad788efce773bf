import numpy as np
import pytest

import rayseg.tensor as T
from rayseg.errors import ContractError
from rayseg.field import render_ray
from rayseg.gradcheck import gradcheck
from rayseg.transformer import (LayerParams, RayTransformer, SegHead,
                                TransformerConfig, Variant, _make_layer,
                                attention_rows, cross_entropy,
                                fuse_and_classify, msa_layer, one_hot,
                                render_semantic, seg_loss, select_valid)


def _cfg(**kw):
    base = dict(feature_dim=12, num_classes=5, cnn_dim=6, num_layers=2,
                num_heads=2, model_dim=16, ffn_mult=2, sem_dim=8)
    base.update(kw)
    return TransformerConfig(**base)


# -- selector ---------------------------------------------------------------

def test_select_valid_picks_top_density_in_depth_order():
    sigma = T.Tensor([[0.1, 5.0, 0.2, 3.0]])
    feats = T.Tensor(np.arange(8, dtype=float).reshape(1, 4, 2))
    deltas = T.Tensor([[1.0, 2.0, 3.0, 4.0]])
    sel_feats, sel_sigma, sel_deltas, idx = select_valid(sigma, feats, deltas, k=2)
    np.testing.assert_array_equal(idx, [[1, 3]])
    np.testing.assert_array_equal(sel_sigma.values, [[5.0, 3.0]])
    np.testing.assert_array_equal(sel_deltas.values, [[2.0, 4.0]])
    np.testing.assert_array_equal(sel_feats.values[0, 0], [2.0, 3.0])


def test_select_valid_tie_breaks_to_lower_depth():
    sigma = T.Tensor([[1.0, 1.0, 0.0]])
    feats = T.Tensor(np.zeros((1, 3, 1)))
    deltas = T.Tensor(np.ones((1, 3)))
    _, _, _, idx = select_valid(sigma, feats, deltas, k=1)
    np.testing.assert_array_equal(idx, [[0]])


def test_select_valid_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = int(rng.integers(1, 6))
        n = int(rng.integers(2, 40))
        k = int(rng.integers(1, n + 1))
        sigma = rng.uniform(0, 4, (b, n))
        _, _, _, idx = select_valid(T.Tensor(sigma), T.Tensor(rng.random((b, n, 3))),
                                    T.Tensor(np.ones((b, n))), k)
        for r in range(b):
            oracle = set(np.sort(np.argsort(-sigma[r], kind="stable")[:k]))
            assert set(idx[r].tolist()) == oracle
            assert np.all(np.diff(idx[r]) > 0)  # depth order


def test_select_valid_grads_reach_selected_only():
    rng = np.random.default_rng(1)
    feats = T.Tensor(rng.random((2, 6, 3)), requires_grad=True)
    sigma = T.Tensor(rng.uniform(0, 1, (2, 6)))
    deltas = T.Tensor(np.ones((2, 6)))
    with T.Tape() as tape:
        sel_feats, _, _, idx = select_valid(sigma, feats, deltas, k=2)
        loss = T.tensor_sum(sel_feats)
    tape.backward(loss)
    mask = np.zeros((2, 6, 3))
    for r in range(2):
        mask[r, idx[r]] = 1.0
    np.testing.assert_array_equal(feats.grad, mask)


# -- attention ---------------------------------------------------------------

def test_single_token_attention_weight_is_one():
    rng = np.random.default_rng(2)
    layer = _make_layer(rng, 16, 2, "l0")
    tokens = T.Tensor(rng.standard_normal((3, 1, 16)))
    rows = attention_rows(layer, tokens, heads=2)
    np.testing.assert_array_equal(rows.values, np.ones((3, 2, 1, 1)))


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(3)
    layer = _make_layer(rng, 16, 2, "l0")
    tokens = T.Tensor(rng.standard_normal((4, 7, 16)))
    rows = attention_rows(layer, tokens, heads=4)
    np.testing.assert_allclose(rows.values.sum(axis=-1), 1.0, atol=1e-12)


def test_msa_layer_permutation_equivariance():
    rng = np.random.default_rng(4)
    layer = _make_layer(rng, 16, 2, "l0")
    tokens = rng.standard_normal((2, 9, 16))
    perm = rng.permutation(9)
    out = msa_layer(layer, T.Tensor(tokens), heads=4).values
    out_perm = msa_layer(layer, T.Tensor(tokens[:, perm]), heads=4).values
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)


# -- ray transform -----------------------------------------------------------

def test_variant_b_is_per_point_head():
    rng = np.random.default_rng(5)
    rt = RayTransformer(_cfg(), Variant.B, rng)
    feats = rng.standard_normal((3, 4, 12))
    out = rt.forward(T.Tensor(feats), None).values
    assert out.shape == (3, 4, 8)
    # Per-point: any single point maps identically regardless of its ray.
    solo = rt.forward(T.Tensor(feats[1:2, 2:3]), None).values
    np.testing.assert_allclose(solo[0, 0], out[1, 2], atol=1e-12)


@pytest.mark.parametrize("variant", list(Variant))
def test_output_shape_all_variants(variant):
    rng = np.random.default_rng(6)
    rt = RayTransformer(_cfg(), variant, rng)
    feats = T.Tensor(rng.standard_normal((2, 5, 12)))
    token = T.Tensor(rng.standard_normal((2, 6))) if variant.uses_token else None
    out = rt.forward(feats, token)
    assert out.shape == (2, 5, 8)


def test_token_contract_enforced():
    rng = np.random.default_rng(7)
    rt = RayTransformer(_cfg(), Variant.RT, rng)
    with pytest.raises(ContractError):
        rt.forward(T.Tensor(np.zeros((1, 3, 12))), T.Tensor(np.zeros((1, 6))))
    rtt = RayTransformer(_cfg(), Variant.RTT, rng)
    with pytest.raises(ContractError):
        rtt.forward(T.Tensor(np.zeros((1, 3, 12))), None)


def test_token_participates_via_keys_and_values():
    # With identical weights, RTT with a zero token differs from RT only
    # through the token's key/value participation in attention.
    rng = np.random.default_rng(8)
    cfg = _cfg()
    rtt = RayTransformer(cfg, Variant.RTT, np.random.default_rng(42))
    rt = RayTransformer(cfg, Variant.RT, np.random.default_rng(42))
    # Same init seed: the shared submodules got identical weights.
    for a, b in zip(rt.in_proj.params(), rtt.in_proj.params()):
        np.testing.assert_array_equal(a.values, b.values)
    feats = rng.standard_normal((2, 4, 12))
    token = np.zeros((2, 6))
    out_rt = rt.forward(T.Tensor(feats), None).values
    out_rtt = rtt.forward(T.Tensor(feats), T.Tensor(token)).values
    assert out_rt.shape == out_rtt.shape
    # The projected zero token still has a bias row, so outputs differ.
    assert not np.allclose(out_rt, out_rtt)


# -- semantic rendering -------------------------------------------------------

def test_render_semantic_saturated_single_point():
    sem = T.Tensor([[[1.0, 2.0, 3.0]]])
    out = render_semantic(sem, T.Tensor([[1e9]]), T.Tensor([[1.0]]))
    np.testing.assert_allclose(out.values, [[1.0, 2.0, 3.0]], atol=1e-12)


def test_render_semantic_zero_density():
    sem = T.Tensor(np.ones((2, 3, 4)))
    out = render_semantic(sem, T.Tensor(np.zeros((2, 3))), T.Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(out.values, np.zeros((2, 4)))


def test_render_semantic_is_render_ray_on_subray():
    rng = np.random.default_rng(9)
    sem = rng.standard_normal((3, 5, 6))
    sigma = rng.uniform(0, 4, (3, 5))
    deltas = rng.uniform(0.01, 0.5, (3, 5))
    a = render_semantic(T.Tensor(sem), T.Tensor(sigma), T.Tensor(deltas)).values
    b = render_ray(T.Tensor(sigma), T.Tensor(sem), T.Tensor(deltas))[0].values
    assert np.array_equal(a, b)


# -- fusion and loss -----------------------------------------------------------

def test_fuse_rt_is_plain_affine():
    rng = np.random.default_rng(10)
    head = SegHead(_cfg(), Variant.RT, rng)
    s = rng.standard_normal((4, 8))
    out = fuse_and_classify(head, T.Tensor(s), None).values
    np.testing.assert_allclose(out, s @ head.linear.w.values + head.linear.b.values,
                               atol=1e-12)


def test_fuse_zero_cnn_features_reduces_to_semantic_block():
    rng = np.random.default_rng(11)
    head = SegHead(_cfg(), Variant.RTC, rng)
    s = rng.standard_normal((4, 8))
    out = fuse_and_classify(head, T.Tensor(s), T.Tensor(np.zeros((4, 6)))).values
    block = head.linear.w.values[:8]
    np.testing.assert_allclose(out, s @ block + head.linear.b.values, atol=1e-12)


def test_fuse_contract_errors():
    rng = np.random.default_rng(12)
    with pytest.raises(ContractError):
        fuse_and_classify(SegHead(_cfg(), Variant.RTC, rng),
                          T.Tensor(np.zeros((1, 8))), None)
    with pytest.raises(ContractError):
        fuse_and_classify(SegHead(_cfg(), Variant.RT, rng),
                          T.Tensor(np.zeros((1, 8))), T.Tensor(np.zeros((1, 6))))


def test_fuse_logits_shape_twenty_classes():
    rng = np.random.default_rng(13)
    head = SegHead(_cfg(num_classes=20), Variant.RTTC, rng)
    out = fuse_and_classify(head, T.Tensor(np.zeros((7, 8))),
                            T.Tensor(np.zeros((7, 6))))
    assert out.shape == (7, 20)


def test_seg_loss_perfect_prediction_is_zero():
    target = one_hot(np.array([1, 0]), 3)
    logits = T.Tensor((target * 2000.0) - 1000.0)
    loss = seg_loss(logits, None, target)
    assert abs(float(loss.values)) < 1e-9


def test_seg_loss_uniform_prediction_is_log_l():
    b, l = 6, 5
    target = one_hot(np.zeros(b, dtype=int), l)
    logits = T.Tensor(np.zeros((b, l)))
    loss = seg_loss(logits, None, target)
    assert abs(float(loss.values) - b * np.log(l)) < 1e-12


def test_seg_loss_matches_loop_oracle():
    rng = np.random.default_rng(14)
    b, l = 9, 4
    logits = rng.standard_normal((b, l))
    cnn_logits = rng.standard_normal((b, l))
    ids = rng.integers(0, l, b)
    target = one_hot(ids, l)
    loss = float(seg_loss(T.Tensor(logits), T.Tensor(cnn_logits), target).values)
    acc = 0.0
    for r in range(b):
        for logit_row in (logits[r], cnn_logits[r]):
            p = np.exp(logit_row) / np.exp(logit_row).sum()
            acc -= np.log(p[ids[r]])
    assert abs(loss - acc) < 1e-12


def test_seg_loss_rejects_non_onehot():
    logits = T.Tensor(np.zeros((2, 3)))
    bad = np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]])
    with pytest.raises(ContractError):
        seg_loss(logits, None, bad)
    with pytest.raises(ContractError):
        seg_loss(logits, None, np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]]))


# -- gradients through the whole stage-2 path ---------------------------------

@pytest.mark.parametrize("variant", [Variant.B, Variant.RT, Variant.RTTC])
def test_stage2_path_gradcheck(variant):
    rng = np.random.default_rng(15)
    cfg = _cfg(feature_dim=6, model_dim=8, num_heads=2, sem_dim=4, num_classes=3,
               cnn_dim=4, num_layers=1)
    rt = RayTransformer(cfg, variant, rng)
    head = SegHead(cfg, variant, rng)
    feats = rng.standard_normal((2, 3, 6))
    sigma = rng.uniform(0.1, 2, (2, 3))
    deltas = rng.uniform(0.1, 0.5, (2, 3))
    token = rng.standard_normal((2, 4))
    target = one_hot(np.array([0, 2]), 3)
    params = rt.params() + head.params()
    for p in params:
        # Shake zero-init biases off the ReLU kink, where central
        # differences are undefined.
        p.values = p.values + rng.uniform(0.01, 0.05, p.shape)

    def loss_fn(*_params):
        tok = T.Tensor(token) if variant.uses_token else None
        sem = rt.forward(T.Tensor(feats), tok)
        rendered = render_semantic(sem, T.Tensor(sigma), T.Tensor(deltas))
        cf = T.Tensor(np.zeros((2, cfg.cnn_dim))) if variant.uses_concat else None
        logits = fuse_and_classify(head, rendered, cf)
        return seg_loss(logits, None, target)

    gradcheck(loss_fn, params, rng)
