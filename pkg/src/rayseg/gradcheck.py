"""Central finite-difference verification of the autodiff engine.

``gradcheck`` compares analytic gradients from a tape sweep against central
differences of the same scalar loss.  ``OP_CASES`` enumerates one random-case
builder per registered operator so the whole operator set can be swept.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def gradcheck(fn, inputs, rng, eps: float = 1e-5, rel_tol: float = 1e-4) -> float:
    """Return the worst relative error between analytic and numeric grads.

    ``fn(*inputs) -> Tensor``; the output is contracted with a fixed random
    cotangent to form a scalar, so every output element is exercised.
    The comparison uses ``|a - n| <= rel_tol * max(1, |a|, |n|)``; the
    returned value is the max of ``|a - n| / max(1, |a|, |n|)``.
    """
    out = fn(*inputs)
    cot = rng.standard_normal(out.shape)

    def loss_value() -> float:
        return float((fn(*inputs).values * cot).sum())

    with T.Tape() as tape:
        out = fn(*inputs)
        loss = T.tensor_sum(T.mul(out, T.Tensor(cot)))
    tape.backward(loss)

    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.values)
        flat = x.values.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = loss_value()
            flat[i] = keep - eps
            lo = loss_value()
            flat[i] = keep
            num[i] = (hi - lo) / (2 * eps)
        numeric = num.reshape(x.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float(np.max(np.abs(analytic - numeric) / denom))
        worst = max(worst, err)
        if err > rel_tol:
            raise AssertionError(
                f"gradcheck failed for input {x.name or x.shape}: rel err {err:.3e}")
    return worst


def _rand(rng, *shape, lo=-2.0, hi=2.0, avoid_zero=0.0):
    v = rng.uniform(lo, hi, size=shape)
    if avoid_zero:
        v = np.where(np.abs(v) < avoid_zero, avoid_zero * np.sign(v) + (v == 0) * avoid_zero, v)
    return T.Tensor(v, requires_grad=True)


def _dims(rng, n, lo=1, hi=8):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(n))


def _case_add(rng):
    s = _dims(rng, 2)
    return T.add, [_rand(rng, *s), _rand(rng, *s)]


def _case_sub(rng):
    s = _dims(rng, 2)
    return T.sub, [_rand(rng, *s), _rand(rng, *s)]


def _case_mul(rng):
    s = _dims(rng, 2)
    return T.mul, [_rand(rng, *s), _rand(rng, *s)]


def _case_neg(rng):
    return T.neg, [_rand(rng, *_dims(rng, 2))]


def _case_scale(rng):
    c = float(rng.uniform(-2, 2))
    return (lambda x: T.scale(x, c)), [_rand(rng, *_dims(rng, 2))]


def _case_add_const(rng):
    c = float(rng.uniform(-2, 2))
    return (lambda x: T.add_const(x, c)), [_rand(rng, *_dims(rng, 2))]


def _case_exp(rng):
    return T.exp, [_rand(rng, *_dims(rng, 2))]


def _case_log(rng):
    return T.log, [_rand(rng, *_dims(rng, 2), lo=0.1, hi=2.0)]


def _case_relu(rng):
    # Keep inputs off the kink, where finite differences are undefined.
    return T.relu, [_rand(rng, *_dims(rng, 2), avoid_zero=0.05)]


def _case_softplus(rng):
    return T.softplus, [_rand(rng, *_dims(rng, 2))]


def _case_sigmoid(rng):
    return T.sigmoid, [_rand(rng, *_dims(rng, 2))]


def _case_affine(rng):
    m, i, o = _dims(rng, 3)
    return T.affine, [_rand(rng, m, i), _rand(rng, i, o), _rand(rng, o)]


def _case_matmul(rng):
    b, m, k, n = _dims(rng, 4, hi=5)
    return T.matmul, [_rand(rng, b, m, k), _rand(rng, b, k, n)]


def _case_sum_all(rng):
    return (lambda x: T.tensor_sum(x)), [_rand(rng, *_dims(rng, 2))]


def _case_sum_axis(rng):
    nd = int(rng.integers(2, 4))
    axis = int(rng.integers(0, nd))
    keep = bool(rng.integers(0, 2))
    return (lambda x: T.tensor_sum(x, axis=axis, keepdims=keep)), [_rand(rng, *_dims(rng, nd))]


def _case_softmax(rng):
    s = _dims(rng, 2)
    axis = int(rng.integers(0, 2))
    return (lambda x: T.softmax(x, axis=axis)), [_rand(rng, *s)]


def _case_log_softmax(rng):
    s = _dims(rng, 2)
    return (lambda x: T.log_softmax(x, axis=-1)), [_rand(rng, *s)]


def _case_cumsum_exclusive(rng):
    s = _dims(rng, 2)
    axis = int(rng.integers(0, 2))
    return (lambda x: T.cumsum_exclusive(x, axis=axis)), [_rand(rng, *s)]


def _case_layer_norm(rng):
    b = int(rng.integers(1, 6))
    d = int(rng.integers(2, 8))
    return T.layer_norm, [_rand(rng, b, d), _rand(rng, d), _rand(rng, d)]


def _case_reshape(rng):
    a, b = _dims(rng, 2)
    return (lambda x: T.reshape(x, (b * a,))), [_rand(rng, a, b)]


def _case_transpose(rng):
    s = _dims(rng, 3, hi=5)
    axes = tuple(rng.permutation(3).tolist())
    return (lambda x: T.transpose(x, axes)), [_rand(rng, *s)]


def _case_concat(rng):
    b = int(rng.integers(1, 6))
    c1, c2 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return (lambda x, y: T.concat([x, y], axis=1)), [_rand(rng, b, c1), _rand(rng, b, c2)]


def _case_take_rows(rng):
    m, f = _dims(rng, 2)
    k = int(rng.integers(1, 8))
    idx = rng.integers(0, m, size=k)
    return (lambda x: T.take_rows(x, idx)), [_rand(rng, m, f)]


def _case_take_along(rng):
    b, n, f = _dims(rng, 3)
    k = int(rng.integers(1, n + 1))
    idx = np.stack([rng.integers(0, n, size=k) for _ in range(b)])
    return (lambda x: T.take_along(x, idx)), [_rand(rng, b, n, f)]


def _case_weighted_sum(rng):
    b, n, c = _dims(rng, 3)
    return T.weighted_sum, [_rand(rng, b, n), _rand(rng, b, n, c)]


def _case_conv2d(rng):
    h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    return T.conv2d, [_rand(rng, h, w, ci), _rand(rng, 3, 3, ci, co), _rand(rng, co)]


OP_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "neg": _case_neg,
    "scale": _case_scale,
    "add_const": _case_add_const,
    "exp": _case_exp,
    "log": _case_log,
    "relu": _case_relu,
    "softplus": _case_softplus,
    "sigmoid": _case_sigmoid,
    "affine": _case_affine,
    "matmul": _case_matmul,
    "sum_all": _case_sum_all,
    "sum_axis": _case_sum_axis,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "cumsum_exclusive": _case_cumsum_exclusive,
    "layer_norm": _case_layer_norm,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "take_rows": _case_take_rows,
    "take_along": _case_take_along,
    "weighted_sum": _case_weighted_sum,
    "conv2d": _case_conv2d,
}
