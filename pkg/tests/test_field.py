import numpy as np
import pytest

import rayseg.tensor as T
from rayseg.errors import DomainError, ShapeError
from rayseg.field import (ColorField, FieldConfig, PositionalEncoding, encode,
                          render_ray, rgb_loss)
from rayseg.gradcheck import gradcheck


def test_encode_zero_input():
    pe = PositionalEncoding(num_freqs=2)
    out = encode(pe, np.zeros((1, 1)))
    np.testing.assert_array_equal(out, [[0.0, 0.0, 1.0, 0.0, 1.0]])


def test_encode_output_dim():
    pe = PositionalEncoding(num_freqs=10)
    assert pe.out_dim(3) == 63
    out = encode(pe, np.zeros((4, 3)))
    assert out.shape == (4, 63)


def test_encode_half_direct_evaluation():
    pe = PositionalEncoding(num_freqs=1)
    out = encode(pe, np.array([[0.5]]))
    np.testing.assert_allclose(out, [[0.5, 1.0, 0.0]], atol=1e-15)


def test_encode_matches_loop_oracle():
    rng = np.random.default_rng(0)
    pe = PositionalEncoding(num_freqs=4)
    x = rng.uniform(-1, 1, (5, 3))
    out = encode(pe, x)
    for r in range(5):
        for d in range(3):
            block = [x[r, d]]
            for k in range(4):
                block += [np.sin(2**k * np.pi * x[r, d]), np.cos(2**k * np.pi * x[r, d])]
            np.testing.assert_allclose(out[r, d * 9:(d + 1) * 9], block, atol=1e-15)


def _tiny_field(seed=0):
    cfg = FieldConfig(pe_pos=4, pe_dir=2, trunk_layers=3, trunk_width=16,
                      skip_at=2, dir_width=8)
    return ColorField(cfg, np.random.default_rng(seed))


def test_field_forward_ranges():
    field = _tiny_field()
    rng = np.random.default_rng(1)
    pos = rng.uniform(-1, 1, (4, 7, 3))
    dirs = rng.standard_normal((4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sigma, color, feat = field.forward(pos, dirs)
    assert sigma.shape == (4, 7) and color.shape == (4, 7, 3) and feat.shape == (4, 7, 16)
    assert np.isfinite(sigma.values).all() and np.isfinite(color.values).all()
    assert np.all(sigma.values >= 0)
    assert np.all((color.values > 0) & (color.values < 1))


def test_sigma_independent_of_direction_bitwise():
    field = _tiny_field()
    rng = np.random.default_rng(2)
    pos = rng.uniform(-1, 1, (3, 5, 3))
    d1 = np.tile(np.array([[0.0, 0.0, 1.0]]), (3, 1))
    d2 = np.tile(np.array([[1.0, 0.0, 0.0]]), (3, 1))
    s1, _, f1 = field.forward(pos, d1)
    s2, _, f2 = field.forward(pos, d2)
    assert np.array_equal(s1.values, s2.values)
    assert np.array_equal(f1.values, f2.values)


def test_unnormalized_positions_rejected():
    field = _tiny_field()
    with pytest.raises(DomainError):
        field.spatial(np.array([[100.0, 0.0, 0.0]]))


def test_render_ray_empty_space():
    sigma = T.Tensor(np.zeros((2, 4)))
    attr = T.Tensor(np.ones((2, 4, 3)))
    deltas = T.Tensor(np.full((2, 4), 0.5))
    out, weights = render_ray(sigma, attr, deltas)
    np.testing.assert_array_equal(out.values, 0.0)
    np.testing.assert_array_equal(weights.values, 0.0)


def test_render_ray_closed_form_two_points():
    # First interval absorbs half, second is opaque: result (0.5, 0.5, 0).
    sigma = T.Tensor([[np.log(2.0), 1e6]])
    attr = T.Tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    deltas = T.Tensor([[1.0, 1.0]])
    out, weights = render_ray(sigma, attr, deltas)
    np.testing.assert_allclose(out.values, [[0.5, 0.5, 0.0]], atol=1e-12)
    np.testing.assert_allclose(weights.values, [[0.5, 0.5]], atol=1e-12)


def test_render_ray_weight_telescoping():
    rng = np.random.default_rng(3)
    sigma = rng.uniform(0, 5, (100, 32))
    deltas = rng.uniform(0.01, 0.2, (100, 32))
    attr = rng.uniform(0, 1, (100, 32, 3))
    out, weights = render_ray(T.Tensor(sigma), T.Tensor(attr), T.Tensor(deltas))
    w = weights.values
    assert np.all(w >= 0)
    total = w.sum(axis=1)
    expected = 1.0 - np.exp(-(sigma * deltas).sum(axis=1))
    np.testing.assert_allclose(total, expected, atol=1e-12)
    assert np.all(total <= 1.0 + 1e-12)


def test_render_ray_transmittance_nonincreasing():
    rng = np.random.default_rng(4)
    sigma = rng.uniform(0, 3, (50, 16))
    deltas = rng.uniform(0.01, 0.3, (50, 16))
    trans = np.exp(-np.concatenate([np.zeros((50, 1)),
                                    np.cumsum(sigma * deltas, axis=1)[:, :-1]], axis=1))
    assert np.all(np.diff(trans, axis=1) <= 1e-15)


def test_render_ray_interval_split_additivity():
    # Splitting one interval into two with the same sigma leaves the result
    # unchanged (additivity of optical depth).
    rng = np.random.default_rng(5)
    sigma = rng.uniform(0.1, 3, (1, 4))
    deltas = rng.uniform(0.1, 0.5, (1, 4))
    attr = rng.uniform(0, 1, (1, 4, 3))
    out1, _ = render_ray(T.Tensor(sigma), T.Tensor(attr), T.Tensor(deltas))

    sigma2 = np.insert(sigma, 2, sigma[0, 1], axis=1)
    attr2 = np.insert(attr, 2, attr[0, 1], axis=1)
    deltas2 = deltas.copy()
    deltas2[0, 1] /= 2
    deltas2 = np.insert(deltas2, 2, deltas[0, 1] / 2, axis=1)
    out2, _ = render_ray(T.Tensor(sigma2), T.Tensor(attr2), T.Tensor(deltas2))
    np.testing.assert_allclose(out1.values, out2.values, atol=1e-9)


def test_render_ray_rejects_negative_inputs():
    with pytest.raises(DomainError):
        render_ray(T.Tensor([[-0.1]]), T.Tensor([[[1.0]]]), T.Tensor([[1.0]]))
    with pytest.raises(DomainError):
        render_ray(T.Tensor([[0.1]]), T.Tensor([[[1.0]]]), T.Tensor([[0.0]]))


def test_render_ray_gradcheck():
    rng = np.random.default_rng(6)
    sigma = T.Tensor(rng.uniform(0.05, 2, (3, 5)), requires_grad=True)
    attr = T.Tensor(rng.uniform(0, 1, (3, 5, 2)), requires_grad=True)
    deltas = T.Tensor(rng.uniform(0.05, 0.4, (3, 5)))
    gradcheck(lambda s, a: render_ray(s, a, deltas)[0], [sigma, attr], rng)


def test_rgb_loss_values():
    pred = T.Tensor([[0.2, 0.4, 0.6]])
    assert rgb_loss(pred, T.Tensor([[0.2, 0.4, 0.6]])).values == 0.0
    off = T.Tensor([[1.2, 0.4, 0.6]])
    assert abs(rgb_loss(off, T.Tensor([[0.2, 0.4, 0.6]])).values - 1.0) < 1e-12


def test_rgb_loss_matches_loop_oracle():
    rng = np.random.default_rng(7)
    pred = rng.uniform(0, 1, (17, 3))
    target = rng.uniform(0, 1, (17, 3))
    loss = rgb_loss(T.Tensor(pred), T.Tensor(target)).values
    acc = 0.0
    for r in range(17):
        for c in range(3):
            acc += (pred[r, c] - target[r, c]) ** 2
    assert abs(float(loss) - acc) < 1e-12


def test_rgb_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        rgb_loss(T.Tensor([[0.0, 0.0, 0.0]]), T.Tensor([[0.0, 0.0]]))


def test_field_gradcheck_end_to_end():
    # Loss -> render -> field gradients against finite differences.
    field = _tiny_field(seed=3)
    rng = np.random.default_rng(8)
    pos = rng.uniform(-1, 1, (2, 4, 3))
    dirs = np.tile(np.array([[0.0, 0.0, 1.0]]), (2, 1))
    deltas = rng.uniform(0.05, 0.2, (2, 4))
    target = rng.uniform(0, 1, (2, 3))
    params = field.params()

    def loss_fn(*_params):
        sigma, color, _ = field.forward(pos, dirs, check=False)
        rendered, _ = render_ray(sigma, color, T.Tensor(deltas))
        return rgb_loss(rendered, T.Tensor(target))

    gradcheck(loss_fn, params, rng)


def test_frozen_spatial_gets_no_grads():
    field = _tiny_field(seed=4)
    field.set_spatial_trainable(False)
    rng = np.random.default_rng(9)
    pos = rng.uniform(-1, 1, (2, 4, 3))
    dirs = np.tile(np.array([[0.0, 0.0, 1.0]]), (2, 1))
    with T.Tape() as tape:
        sigma, color, _ = field.forward(pos, dirs)
        rendered, _ = render_ray(sigma, color, T.Tensor(np.full((2, 4), 0.1)))
        loss = rgb_loss(rendered, T.Tensor(np.zeros((2, 3))))
    tape.backward(loss)
    assert all(p.grad is None for p in field.spatial_params())
    assert all(p.grad is not None for p in field.direction_params())
