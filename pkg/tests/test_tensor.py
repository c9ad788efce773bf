import numpy as np
import pytest

import rayseg.tensor as T
from rayseg.errors import ContractError, NumericFault, ShapeError
from rayseg.gradcheck import OP_CASES, gradcheck


def test_affine_identity():
    x = T.Tensor([[1.0, 2.0]])
    w = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.Tensor([0.0, 0.0])
    out = T.affine(x, w, b)
    np.testing.assert_array_equal(out.values, [[1.0, 2.0]])


def test_affine_zero_input_returns_bias():
    x = T.Tensor([[0.0, 0.0]])
    w = T.Tensor([[5.0, -1.0], [2.0, 7.0]])
    b = T.Tensor([3.0, 4.0])
    out = T.affine(x, w, b)
    np.testing.assert_array_equal(out.values, [[3.0, 4.0]])


def test_affine_hand_matmul():
    # Oracle: hand matrix multiply of [[1,1]] @ [[2,3],[4,5]] + [1,1].
    x = T.Tensor([[1.0, 1.0]])
    w = T.Tensor([[2.0, 3.0], [4.0, 5.0]])
    b = T.Tensor([1.0, 1.0])
    out = T.affine(x, w, b)
    np.testing.assert_allclose(out.values, [[7.0, 9.0]], rtol=0, atol=0)


def test_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        T.affine(T.Tensor([[1.0, 2.0, 3.0]]), T.Tensor([[1.0], [2.0]]), T.Tensor([0.0]))


def test_softmax_symmetry():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.values, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    out = T.softmax(T.Tensor([1000.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.values, [1.0, 0.0], atol=1e-12)
    assert np.isfinite(out.values).all()


def test_softmax_direct_oracle():
    x = np.array([1.0, 2.0, 3.0])
    expected = np.exp(x) / np.exp(x).sum()
    out = T.softmax(T.Tensor(x), axis=-1)
    np.testing.assert_allclose(out.values, expected, atol=1e-12)
    np.testing.assert_allclose(out.values, [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(7)
    x = rng.uniform(-3, 3, size=(16, 9))
    out = T.softmax(T.Tensor(x), axis=-1)
    np.testing.assert_allclose(out.values.sum(axis=-1), 1.0, atol=1e-12)
    shifted = T.softmax(T.Tensor(x + 13.7), axis=-1)
    np.testing.assert_allclose(out.values, shifted.values, atol=1e-12)


def test_backward_square_sum():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.tensor_sum(T.mul(x, x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_root_is_noop():
    c = T.Tensor([3.0])
    with T.Tape() as tape:
        y = T.tensor_sum(T.mul(c, c))
    tape.backward(y)
    assert c.grad is None
    assert tape.records == []


def test_backward_rejects_nonscalar_root():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_gradient_accumulation_matches_sum_of_single_uses():
    # grad of f(x, x) equals the sum of per-slot grads of f(x1, x2) at x1=x2=x.
    rng = np.random.default_rng(3)
    vals = rng.uniform(-2, 2, size=(4, 3))

    x = T.Tensor(vals, requires_grad=True)
    with T.Tape() as tape:
        y = T.tensor_sum(T.exp(T.mul(x, x)))
    tape.backward(y)
    twice = x.grad

    x1 = T.Tensor(vals, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.tensor_sum(T.exp(T.mul(x1, T.Tensor(vals)))))
    x2 = T.Tensor(vals, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(T.tensor_sum(T.exp(T.mul(T.Tensor(vals), x2))))
    np.testing.assert_allclose(twice, x1.grad + x2.grad, atol=1e-12)


def test_no_recording_without_tape():
    x = T.Tensor([1.0], requires_grad=True)
    y = T.mul(x, x)
    assert not y.requires_grad or T.active_tape() is None
    assert T.active_tape() is None


def test_composite_graph_finite_differences():
    rng = np.random.default_rng(11)

    def fn(a, w, b):
        h = T.relu(T.affine(a, w, b))
        s = T.softmax(h, axis=-1)
        return T.mul(s, T.exp(T.scale(h, 0.1)))

    inputs = [
        T.Tensor(rng.uniform(-1, 1, (5, 4)), requires_grad=True),
        T.Tensor(rng.uniform(-1, 1, (4, 6)), requires_grad=True),
        T.Tensor(rng.uniform(-1, 1, (6,)), requires_grad=True),
    ]
    gradcheck(fn, inputs, rng)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_each_op_gradcheck_smoke(name):
    rng = np.random.default_rng(hash(name) % (2**32))
    for _ in range(3):
        fn, inputs = OP_CASES[name](rng)
        gradcheck(fn, inputs, rng)


def test_take_along_gathers_and_scatters():
    x = T.Tensor(np.arange(24, dtype=float).reshape(2, 4, 3), requires_grad=True)
    idx = np.array([[0, 2], [3, 3]])
    with T.Tape() as tape:
        out = T.take_along(x, idx)
        loss = T.tensor_sum(out)
    np.testing.assert_array_equal(out.values[0], x.values[0, [0, 2]])
    np.testing.assert_array_equal(out.values[1], x.values[1, [3, 3]])
    tape.backward(loss)
    expected = np.zeros((2, 4, 3))
    expected[0, 0] = expected[0, 2] = 1.0
    expected[1, 3] = 2.0  # duplicate index accumulates
    np.testing.assert_array_equal(x.grad, expected)


def test_cumsum_exclusive_values():
    x = T.Tensor([[1.0, 2.0, 3.0]])
    out = T.cumsum_exclusive(x, axis=-1)
    np.testing.assert_array_equal(out.values, [[0.0, 1.0, 3.0]])


def test_weighted_sum_matches_einsum():
    rng = np.random.default_rng(5)
    w = rng.uniform(0, 1, (3, 7))
    a = rng.uniform(-1, 1, (3, 7, 4))
    out = T.weighted_sum(T.Tensor(w), T.Tensor(a))
    np.testing.assert_allclose(out.values, np.einsum("bn,bnc->bc", w, a), atol=1e-12)


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, (5, 6, 2))
    k = rng.uniform(-1, 1, (3, 3, 2, 3))
    b = rng.uniform(-1, 1, 3)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b)).values
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 6, 3))
    for i in range(5):
        for j in range(6):
            patch = pad[i:i + 3, j:j + 3, :]
            ref[i, j] = np.tensordot(patch, k, axes=([0, 1, 2], [0, 1, 2])) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_assert_all_finite_raises():
    bad = T.Tensor([1.0, np.nan])
    with pytest.raises(NumericFault):
        T.assert_all_finite(bad, "unit test")
    T.assert_all_finite(T.Tensor([1.0, 2.0]), "ok")


def test_worker_private_gradients_merge():
    # Two private sweeps over disjoint chunks merge to the full-batch grad.
    rng = np.random.default_rng(21)
    w = T.Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
    b = T.Tensor(np.zeros(2), requires_grad=True)
    x = rng.uniform(-1, 1, (8, 3))

    with T.Tape() as tape:
        loss = T.tensor_sum(T.affine(T.Tensor(x), w, b))
    tape.backward(loss)
    full_w, full_b = w.grad.copy(), b.grad.copy()

    w.zero_grad(), b.zero_grad()
    merged_w = np.zeros_like(w.values)
    merged_b = np.zeros_like(b.values)
    for chunk in (x[:5], x[5:]):
        with T.Tape() as tape:
            loss = T.tensor_sum(T.affine(T.Tensor(chunk), w, b))
        grads = tape.gradients(loss)
        merged_w += grads[id(w)]
        merged_b += grads[id(b)]
    np.testing.assert_allclose(merged_w, full_w, atol=1e-12)
    np.testing.assert_allclose(merged_b, full_b, atol=1e-12)
