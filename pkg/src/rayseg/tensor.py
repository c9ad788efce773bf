"""Minimal reverse-mode automatic differentiation over float64 numpy buffers.

Design: define-by-run.  Operations execute eagerly on ``Tensor.values`` and,
when a ``Tape`` is active and an input requires gradients, append a backward
rule to that tape.  ``Tape.backward(root)`` replays the rules in reverse
recording order, which visits every node after all of its consumers, so a
single pass suffices and gradients accumulate additively across reuse.

The operator set is fixed to what the pipeline needs; there is no general
broadcasting engine.  Everything is float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 buffer plus autodiff bookkeeping.

    ``grad`` stays ``None`` until a backward pass deposits into it.
    """

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values, name: str = "") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class _Record:
    """One recorded op: the output it produced and how to push grads back."""

    __slots__ = ("out", "backward")

    def __init__(self, out: Tensor, backward: Callable[[np.ndarray, dict], None]):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered log of operations for one forward pass.

    Use as a context manager; nesting pushes a fresh tape so parallel workers
    (one thread each) record privately.  A tape is single-use: build, call
    :meth:`backward` or :meth:`gradients` once, discard.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def gradients(self, root: Tensor) -> dict:
        """Reverse sweep from a scalar root.

        Returns {id(tensor): grad array} for every requires_grad tensor the
        sweep reached, without touching ``Tensor.grad`` — the caller owns the
        merge (the private-buffer half of the worker/reducer contract).  The
        dict also carries an id -> Tensor index under the key ``"_tensors"``.
        """
        if root.values.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {root.shape}")
        grads: dict = {id(root): np.ones_like(root.values),
                       "_tensors": {id(root): root}}
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            rec.backward(g, grads)
        return grads

    def backward(self, root: Tensor):
        """Populate ``.grad`` on every requires_grad tensor reachable from root,
        accumulating additively into grads already present."""
        grads = self.gradients(root)
        index = grads.pop("_tensors")
        for tid, t in index.items():
            g = grads.get(tid)
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g


def _want(t: Tensor) -> bool:
    return t.requires_grad


def _accum(grads: dict, t: Tensor, g: np.ndarray, own: bool = True):
    """Add ``g`` to the running grad for ``t`` inside a grads dict.

    ``own=False`` marks ``g`` as a view of someone else's buffer; it is
    copied before being stored so later ``+=`` cannot corrupt the source.
    """
    key = id(t)
    cur = grads.get(key)
    if cur is None:
        grads[key] = g if own else g.copy()
        grads.setdefault("_tensors", {})[key] = t
    else:
        cur += g


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, backward))
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    out = Tensor(a.values + b.values)

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g, own=False)
        if _want(b):
            _accum(grads, b, g, own=False)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.values - b.values)

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g, own=False)
        if _want(b):
            _accum(grads, b, -g)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.values * b.values)

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g * b.values)
        if _want(b):
            _accum(grads, b, g * a.values)

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.values)

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, -g)

    return _record(out, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.values * c)

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g * c)

    return _record(out, (a,), bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values + float(c))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g, own=False)

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.values))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g * out.values)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.values))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g / a.values)

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g * (a.values > 0.0))

    return _record(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; derivative is the logistic function."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.values))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g * _logistic(a.values))

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(_logistic(a.values))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g * out.values * (1.0 - out.values))

    return _record(out, (a,), bwd)


def _logistic(x: np.ndarray) -> np.ndarray:
    # Stable on both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x:[M,I], w:[I,O], b:[O]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.values.ndim != 2 or w.values.ndim != 2:
        raise ShapeError(f"affine: need 2-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: inner dims disagree {x.shape} vs {w.shape}")
    if b.values.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine: bias shape {b.shape} does not match {w.shape}")
    out = Tensor(x.values @ w.values + b.values)

    def bwd(g, grads):
        if _want(x):
            _accum(grads, x, g @ w.values.T)
        if _want(w):
            _accum(grads, w, x.values.T @ g)
        if _want(b):
            _accum(grads, b, g.sum(axis=0))

    return _record(out, (x, w, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-d")
    if a.values.ndim != b.values.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims disagree {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} vs {b.shape}")
    out = Tensor(a.values @ b.values)

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g @ np.swapaxes(b.values, -1, -2))
        if _want(b):
            _accum(grads, b, np.swapaxes(a.values, -1, -2) @ g)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def bwd(g, grads):
        if not _want(a):
            return
        if axis is None:
            _accum(grads, a, np.broadcast_to(g, a.shape), own=False)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(grads, a, np.broadcast_to(ge, a.shape), own=False)

    return _record(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    a = as_tensor(a)
    if a.shape[axis] < 1:
        raise ShapeError("softmax: axis must have length >= 1")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def bwd(g, grads):
        if _want(a):
            s = out.values
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(grads, a, s * (g - dot))

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)

    def bwd(g, grads):
        if _want(a):
            soft = np.exp(out.values)
            _accum(grads, a, g - soft * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), bwd)


def cumsum_exclusive(a: Tensor, axis: int = -1) -> Tensor:
    """out[..., i] = sum of a[..., :i] along ``axis`` (zero first entry)."""
    a = as_tensor(a)
    inc = np.cumsum(a.values, axis=axis)
    out_vals = np.zeros_like(a.values)
    src = [slice(None)] * a.values.ndim
    dst = [slice(None)] * a.values.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out_vals[tuple(dst)] = inc[tuple(src)]
    out = Tensor(out_vals)

    def bwd(g, grads):
        if _want(a):
            # d/da_j = sum over i>j of g_i: suffix sum shifted by one.
            flip = [slice(None)] * g.ndim
            flip[axis] = slice(None, None, -1)
            suffix = np.cumsum(g[tuple(flip)], axis=axis)[tuple(flip)]
            _accum(grads, a, suffix - g)

    return _record(out, (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scales must have shape ({d},)")
    mean = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean) * inv
    out = Tensor(xhat * gamma.values + beta.values)

    def bwd(g, grads):
        lead = tuple(range(g.ndim - 1))
        if _want(gamma):
            _accum(grads, gamma, (g * xhat).sum(axis=lead))
        if _want(beta):
            _accum(grads, beta, g.sum(axis=lead))
        if _want(x):
            gy = g * gamma.values
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _accum(grads, x, (gy - m1 - xhat * m2) * inv)

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values.reshape(shape))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g.reshape(a.shape), own=False)

    return _record(out, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(a.values.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g, grads):
        if _want(a):
            _accum(grads, a, g.transpose(inverse), own=False)

    return _record(out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g, grads):
        sl = [slice(None)] * g.ndim
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _want(p):
                sl[axis] = slice(int(lo), int(hi))
                _accum(grads, p, g[tuple(sl)], own=False)

    return _record(out, tuple(parts), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by integer index; scatter-add on backward."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape}")
    out = Tensor(a.values[idx])

    def bwd(g, grads):
        if _want(a):
            acc = np.zeros_like(a.values)
            np.add.at(acc, idx, g)
            _accum(grads, a, acc)

    return _record(out, (a,), bwd)


def take_along(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 1: a:[B,N,...], idx:[B,K] -> [B,K,...].

    Gradients flow only to the gathered slots.
    """
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_along: idx {idx.shape} does not match {a.shape}")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= a.shape[1]):
        raise ShapeError(f"take_along: index out of range for {a.shape}")
    rows = np.arange(a.shape[0])[:, None]
    out = Tensor(a.values[rows, idx])

    def bwd(g, grads):
        if _want(a):
            acc = np.zeros_like(a.values)
            np.add.at(acc, (rows, idx), g)
            _accum(grads, a, acc)

    return _record(out, (a,), bwd)


def weighted_sum(w: Tensor, attr: Tensor) -> Tensor:
    """einsum('bn,bnc->bc'): per-row weights contracting the middle axis."""
    w, attr = as_tensor(w), as_tensor(attr)
    if w.values.ndim != 2 or attr.values.ndim != 3 or w.shape != attr.shape[:2]:
        raise ShapeError(f"weighted_sum: shapes {w.shape} and {attr.shape}")
    out = Tensor(np.einsum("bn,bnc->bc", w.values, attr.values, optimize=True))

    def bwd(g, grads):
        if _want(w):
            _accum(grads, w, np.einsum("bc,bnc->bn", g, attr.values, optimize=True))
        if _want(attr):
            _accum(grads, attr, np.einsum("bc,bn->bnc", g, w.values, optimize=True))

    return _record(out, (w, attr), bwd)


# ---------------------------------------------------------------------------
# convolution (stride 1, zero same-padding, odd kernel)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """x:[H,W,Ci], k:[kh,kw,Ci,Co], b:[Co] -> [H,W,Co]."""
    x, k, b = as_tensor(x), as_tensor(k), as_tensor(b)
    if x.values.ndim != 3 or k.values.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {k.shape}")
    kh, kw, ci, co = k.shape
    if kh % 2 != 1 or kw % 2 != 1:
        raise ShapeError("conv2d: kernel size must be odd")
    if x.shape[2] != ci or b.shape != (co,):
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {k.shape}")
    h, w = x.shape[:2]
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.values, ((ph, ph), (pw, pw), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    # cols: [H, W, Ci, kh, kw] -> [H*W, kh*kw*Ci] matching kernel layout.
    cols = cols.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * ci)
    kmat = k.values.reshape(kh * kw * ci, co)
    out = Tensor((cols @ kmat + b.values).reshape(h, w, co))

    def bwd(g, grads):
        g2 = g.reshape(h * w, co)
        if _want(b):
            _accum(grads, b, g2.sum(axis=0))
        if _want(k):
            _accum(grads, k, (cols.T @ g2).reshape(k.shape))
        if _want(x):
            gcols = (g2 @ kmat.T).reshape(h, w, kh, kw, ci)
            gpad = np.zeros_like(padded)
            for dy in range(kh):
                for dx in range(kw):
                    gpad[dy:dy + h, dx:dx + w, :] += gcols[:, :, dy, dx, :]
            _accum(grads, x, gpad[ph:ph + h, pw:pw + w, :])

    return _record(out, (x, k, b), bwd)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def assert_all_finite(t: Tensor | np.ndarray, context: str):
    """Raise NumericFault naming ``context`` if any entry is NaN/Inf."""
    from .errors import NumericFault

    arr = t.values if isinstance(t, Tensor) else t
    # One add-reduce is far cheaper than isfinite over big buffers; NaN and
    # +/-Inf both poison the sum.
    if not np.isfinite(arr.sum()):
        raise NumericFault(f"non-finite values in {context}")
