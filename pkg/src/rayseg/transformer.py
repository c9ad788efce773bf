"""Stage-2 semantic path: density-based point selection, self-attention over
the selected point features of each ray (optionally joined by a texture token
from the CNN), semantic rendering over the selected points, fusion with CNN
features, and the segmentation losses.

Variants mirror the ablation ladder:
  B     per-point head on frozen trunk features, no attention
  RT    ray-space self-attention over selected points
  RTT   RT plus the CNN texture token as an extra attention token
  RTC   RT plus CNN features concatenated after semantic rendering
  RTTC  both texture paths
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError
from .field import Linear, render_ray


class Variant(str, Enum):
    B = "B"
    RT = "RT"
    RTT = "RTT"
    RTC = "RTC"
    RTTC = "RTTC"

    @property
    def uses_token(self) -> bool:
        return self in (Variant.RTT, Variant.RTTC)

    @property
    def uses_concat(self) -> bool:
        return self in (Variant.RTC, Variant.RTTC)

    @property
    def uses_cnn(self) -> bool:
        return self.uses_token or self.uses_concat

    @property
    def uses_attention(self) -> bool:
        return self is not Variant.B


def select_valid(sigma, feats, deltas, k: int):
    """Keep the k highest-density points of each ray, re-sorted by depth.

    sigma:[B,N], feats:[B,N,F], deltas:[B,N] -> (sel_feats [B,k,F],
    sel_sigma [B,k], sel_deltas [B,k], sel_idx [B,k]).  Ties break toward the
    lower depth index.  Selection is a hard gather: gradients reach selected
    entries only.
    """
    sigma = T.as_tensor(sigma)
    feats = T.as_tensor(feats)
    deltas = T.as_tensor(deltas)
    n = sigma.shape[1]
    if not 1 <= k <= n:
        raise DomainError(f"k={k} outside [1, {n}]")
    # Stable sort on -sigma resolves ties toward lower index.
    order = np.argsort(-sigma.values, axis=1, kind="stable")[:, :k]
    sel_idx = np.sort(order, axis=1)
    return (T.take_along(feats, sel_idx), T.take_along(sigma, sel_idx),
            T.take_along(deltas, sel_idx), sel_idx)


@dataclass
class LayerParams:
    norm1_g: T.Tensor
    norm1_b: T.Tensor
    wq: Linear
    wk: Linear
    wv: Linear
    proj: Linear
    norm2_g: T.Tensor
    norm2_b: T.Tensor
    ffn1: Linear
    ffn2: Linear

    def params(self):
        out = [self.norm1_g, self.norm1_b, self.norm2_g, self.norm2_b]
        for lin in (self.wq, self.wk, self.wv, self.proj, self.ffn1, self.ffn2):
            out.extend(lin.params())
        return out


def _make_layer(rng, d: int, ffn_mult: int, name: str) -> LayerParams:
    return LayerParams(
        norm1_g=T.parameter(np.ones(d), name=f"{name}/norm1/g"),
        norm1_b=T.parameter(np.zeros(d), name=f"{name}/norm1/b"),
        wq=Linear(rng, d, d, f"{name}/wq"),
        wk=Linear(rng, d, d, f"{name}/wk"),
        wv=Linear(rng, d, d, f"{name}/wv"),
        proj=Linear(rng, d, d, f"{name}/proj"),
        norm2_g=T.parameter(np.ones(d), name=f"{name}/norm2/g"),
        norm2_b=T.parameter(np.zeros(d), name=f"{name}/norm2/b"),
        ffn1=Linear(rng, d, ffn_mult * d, f"{name}/ffn1"),
        ffn2=Linear(rng, ffn_mult * d, d, f"{name}/ffn2"),
    )


def _project_tokens(lin: Linear, tokens: T.Tensor) -> T.Tensor:
    b, t, d = tokens.shape
    flat = T.reshape(tokens, (b * t, d))
    out = lin(flat)
    return T.reshape(out, (b, t, out.shape[1]))


def attention_rows(p: LayerParams, tokens: T.Tensor, heads: int) -> T.Tensor:
    """Attention probabilities [B, heads, T, T]; rows sum to one."""
    normed = T.layer_norm(tokens, p.norm1_g, p.norm1_b)
    return _attention(p, normed, heads)[1]


def _attention(p: LayerParams, tokens: T.Tensor, heads: int):
    b, t, d = tokens.shape
    dh = d // heads
    q = _split_heads(_project_tokens(p.wq, tokens), heads)
    k = _split_heads(_project_tokens(p.wk, tokens), heads)
    v = _split_heads(_project_tokens(p.wv, tokens), heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)                       # [B, h, T, dh]
    ctx = T.transpose(ctx, (0, 2, 1, 3))          # [B, T, h, dh]
    ctx = T.reshape(ctx, (b, t, d))
    return _project_tokens(p.proj, ctx), attn


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    b, t, d = x.shape
    if d % heads:
        raise ContractError(f"model dim {d} not divisible by {heads} heads")
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def msa_layer(p: LayerParams, tokens: T.Tensor, heads: int) -> T.Tensor:
    """Pre-norm residual block: x + MSA(LN(x)), then x + FFN(LN(x))."""
    normed = T.layer_norm(tokens, p.norm1_g, p.norm1_b)
    attended, _ = _attention(p, normed, heads)
    x = T.add(tokens, attended)
    normed2 = T.layer_norm(x, p.norm2_g, p.norm2_b)
    h = T.relu(_project_tokens(p.ffn1, normed2))
    ffn = _project_tokens(p.ffn2, h)
    return T.add(x, ffn)


@dataclass
class TransformerConfig:
    feature_dim: int          # trunk feature width
    num_classes: int
    cnn_dim: int = 32         # texture feature channels
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ffn_mult: int = 2
    sem_dim: int = 64         # per-point semantic feature width


class RayTransformer:
    """Converts selected per-point trunk features into semantic features."""

    def __init__(self, cfg: TransformerConfig, variant: Variant, rng):
        self.cfg = cfg
        self.variant = Variant(variant)
        d = cfg.model_dim
        if self.variant.uses_attention:
            self.in_proj = Linear(rng, cfg.feature_dim, d, "rt/in_proj")
            self.layers = [_make_layer(rng, d, cfg.ffn_mult, f"rt/layer{i}")
                           for i in range(cfg.num_layers)]
            self.out_proj = Linear(rng, d, cfg.sem_dim, "rt/out_proj")
            self.token_proj = (Linear(rng, cfg.cnn_dim, d, "rt/token_proj")
                               if self.variant.uses_token else None)
        else:
            # Baseline: per-point MLP head, no attention.
            self.mlp = [Linear(rng, cfg.feature_dim, d, "rt/mlp0"),
                        Linear(rng, d, d, "rt/mlp1"),
                        Linear(rng, d, cfg.sem_dim, "rt/mlp2")]

    def params(self):
        out = []
        if self.variant.uses_attention:
            out.extend(self.in_proj.params())
            for layer in self.layers:
                out.extend(layer.params())
            out.extend(self.out_proj.params())
            if self.token_proj is not None:
                out.extend(self.token_proj.params())
        else:
            for lin in self.mlp:
                out.extend(lin.params())
        return out

    def forward(self, sel_feats: T.Tensor, cnn_token: T.Tensor | None) -> T.Tensor:
        """sel_feats:[B,k,F], cnn_token:[B,Fc] (iff variant uses it) -> [B,k,S]."""
        if self.variant.uses_token and cnn_token is None:
            raise ContractError(f"variant {self.variant.value} needs a CNN token")
        if not self.variant.uses_token and cnn_token is not None:
            raise ContractError(f"variant {self.variant.value} takes no CNN token")
        b, k, _ = sel_feats.shape
        if not self.variant.uses_attention:
            h = _project_tokens(self.mlp[0], sel_feats)
            h = T.relu(h)
            h = T.relu(_project_tokens(self.mlp[1], h))
            return _project_tokens(self.mlp[2], h)
        tokens = _project_tokens(self.in_proj, sel_feats)
        if self.variant.uses_token:
            tok = self.token_proj(cnn_token)              # [B, d]
            tok = T.reshape(tok, (b, 1, self.cfg.model_dim))
            tokens = T.concat([tokens, tok], axis=1)      # broadcaster slot k+1
        for layer in self.layers:
            tokens = msa_layer(layer, tokens, self.cfg.num_heads)
        if self.variant.uses_token:
            # Drop the texture token's output slot: it broadcasts, it does
            # not predict.
            tokens = T.take_along(tokens, np.tile(np.arange(k), (b, 1)))
        return _project_tokens(self.out_proj, tokens)


def render_semantic(point_semantics: T.Tensor, sel_sigma, sel_deltas) -> T.Tensor:
    """Volume-render the selected points' semantic features: [B,k,S] -> [B,S].

    Delegates to the stage-1 renderer over the gathered sub-ray.
    """
    out, _ = render_ray(sel_sigma, point_semantics, sel_deltas)
    return out


class SegHead:
    """Linear classifier over ray-semantic features, optionally concatenated
    with the per-ray CNN features."""

    def __init__(self, cfg: TransformerConfig, variant: Variant, rng):
        self.variant = Variant(variant)
        in_dim = cfg.sem_dim + (cfg.cnn_dim if self.variant.uses_concat else 0)
        self.linear = Linear(rng, in_dim, cfg.num_classes, "seg/head")

    def params(self):
        return self.linear.params()

    def forward(self, ray_semantics: T.Tensor, cnn_feat: T.Tensor | None) -> T.Tensor:
        if self.variant.uses_concat and cnn_feat is None:
            raise ContractError(f"variant {self.variant.value} needs CNN features")
        if not self.variant.uses_concat and cnn_feat is not None:
            raise ContractError(f"variant {self.variant.value} takes no CNN features")
        if cnn_feat is not None:
            ray_semantics = T.concat([ray_semantics, cnn_feat], axis=1)
        return self.linear(ray_semantics)


def fuse_and_classify(head: SegHead, ray_semantics: T.Tensor,
                      cnn_feat: T.Tensor | None) -> T.Tensor:
    return head.forward(ray_semantics, cnn_feat)


def cross_entropy(logits: T.Tensor, target_onehot: np.ndarray) -> T.Tensor:
    """Sum over rays of -sum_l target_l * log softmax(logits)_l."""
    return T.neg(T.tensor_sum(T.mul(T.log_softmax(logits, axis=1),
                                    T.Tensor(target_onehot))))


def seg_loss(logits: T.Tensor, cnn_logits: T.Tensor | None,
             target_onehot: np.ndarray) -> T.Tensor:
    """Fused-path cross-entropy plus, when the CNN participates, the CNN-path
    cross-entropy under the same targets."""
    target_onehot = np.asarray(target_onehot, dtype=np.float64)
    if target_onehot.ndim != 2 or logits.shape != target_onehot.shape:
        raise ContractError(
            f"targets {target_onehot.shape} do not match logits {logits.shape}")
    is01 = np.all((target_onehot == 0.0) | (target_onehot == 1.0))
    if not is01 or not np.all(target_onehot.sum(axis=1) == 1.0):
        raise ContractError("targets must be one-hot")
    loss = cross_entropy(logits, target_onehot)
    if cnn_logits is not None:
        loss = T.add(loss, cross_entropy(cnn_logits, target_onehot))
    return loss


def one_hot(ids: np.ndarray, num_classes: int) -> np.ndarray:
    ids = np.asarray(ids)
    out = np.zeros((ids.size, num_classes))
    out[np.arange(ids.size), ids.reshape(-1)] = 1.0
    return out
