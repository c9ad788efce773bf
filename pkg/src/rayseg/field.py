"""Color field: sinusoidal encoding, spatial trunk + direction head MLPs,
discretized volume rendering, and the photometric loss.

The spatial trunk maps an encoded position to a density (softplus, so
sigma >= 0) and a feature vector; the direction head maps (feature, encoded
direction) to RGB through a logistic squash.  Density and features depend on
position only — the stage-2 semantic path relies on that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, NumericFault, ShapeError


@dataclass
class PositionalEncoding:
    num_freqs: int
    include_input: bool = True

    @property
    def out_multiplier(self) -> int:
        return (1 if self.include_input else 0) + 2 * self.num_freqs

    def out_dim(self, in_dim: int) -> int:
        return in_dim * self.out_multiplier


def encode(pe: PositionalEncoding, x: np.ndarray) -> np.ndarray:
    """Per input dimension: [x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)].

    Runs off-tape: encodings feed the networks as constants.
    """
    x = np.asarray(x, dtype=np.float64)
    m = pe.out_multiplier
    out = np.empty(x.shape[:-1] + (x.shape[-1] * m,), dtype=np.float64)
    blocks = out.reshape(x.shape[:-1] + (x.shape[-1], m))
    col = 0
    if pe.include_input:
        blocks[..., 0] = x
        col = 1
    for k in range(pe.num_freqs):
        arg = (2.0 ** k * np.pi) * x
        blocks[..., col] = np.sin(arg)
        blocks[..., col + 1] = np.cos(arg)
        col += 2
    return out


@dataclass
class FieldConfig:
    pe_pos: int = 10          # position encoding frequencies
    pe_dir: int = 4           # direction encoding frequencies
    trunk_layers: int = 6
    trunk_width: int = 128
    skip_at: int = 3          # encoded input re-concatenated before this layer
    dir_width: int = 64

    @property
    def feature_dim(self) -> int:
        return self.trunk_width


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class Linear:
    def __init__(self, rng, fan_in: int, fan_out: int, name: str):
        self.w = T.parameter(_glorot(rng, fan_in, fan_out), name=f"{name}/w")
        self.b = T.parameter(np.zeros(fan_out), name=f"{name}/b")

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.affine(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


class ColorField:
    """Spatial trunk (density + features) and direction head (RGB)."""

    def __init__(self, cfg: FieldConfig, rng):
        self.cfg = cfg
        self.pe_pos = PositionalEncoding(cfg.pe_pos)
        self.pe_dir = PositionalEncoding(cfg.pe_dir)
        in_dim = self.pe_pos.out_dim(3)
        w = cfg.trunk_width
        self.trunk = []
        d = in_dim
        for i in range(cfg.trunk_layers):
            if i == cfg.skip_at and i > 0:
                d += in_dim
            self.trunk.append(Linear(rng, d, w, f"trunk/{i}"))
            d = w
        self.sigma_head = Linear(rng, w, 1, "sigma_head")
        dir_dim = self.pe_dir.out_dim(3)
        self.dir_hidden = Linear(rng, w + dir_dim, cfg.dir_width, "dir/hidden")
        self.rgb_head = Linear(rng, cfg.dir_width, 3, "dir/rgb")

    # -- parameter bookkeeping -------------------------------------------

    def spatial_params(self):
        out = []
        for layer in self.trunk:
            out.extend(layer.params())
        out.extend(self.sigma_head.params())
        return out

    def direction_params(self):
        return self.dir_hidden.params() + self.rgb_head.params()

    def params(self):
        return self.spatial_params() + self.direction_params()

    def set_spatial_trainable(self, trainable: bool):
        for p in self.spatial_params():
            p.requires_grad = trainable

    @property
    def spatial_frozen(self) -> bool:
        return not self.spatial_params()[0].requires_grad

    # -- forward ----------------------------------------------------------

    def spatial(self, positions: np.ndarray, check: bool = True):
        """positions:[M,3] normalized so the scene box maps to [-1,1]^3.

        Samples near the far plane spill outside the box (the sampling range
        is the scene's bounding sphere plus margin); anything an order of
        magnitude outside means the caller forgot to normalize.
        """
        if np.abs(positions).max(initial=0.0) > 10.0:
            raise DomainError("positions must be normalized to the scene box")
        enc = T.Tensor(encode(self.pe_pos, positions))
        h = enc
        for i, layer in enumerate(self.trunk):
            if i == self.cfg.skip_at and i > 0:
                h = T.concat([h, enc], axis=1)
            h = T.relu(layer(h))
            if check:
                _finite(h, f"trunk layer {i}")
        sigma = T.softplus(self.sigma_head(h))
        if check:
            _finite(sigma, "sigma head")
        return sigma, h

    def color(self, feat: T.Tensor, dirs_encoded: np.ndarray, check: bool = True):
        """(features [M,W], encoded dirs [M,Dd]) -> rgb [M,3] in (0,1)."""
        h = T.relu(self.dir_hidden(T.concat([feat, T.Tensor(dirs_encoded)], axis=1)))
        rgb = T.sigmoid(self.rgb_head(h))
        if check:
            _finite(rgb, "rgb head")
        return rgb

    def forward(self, positions: np.ndarray, dirs: np.ndarray, check: bool = True):
        """positions:[B,N,3] normalized, dirs:[B,3] unit vectors ->
        (sigma [B,N], color [B,N,3], feat [B,N,F]) as tape tensors."""
        b, n, _ = positions.shape
        flat = positions.reshape(b * n, 3)
        sigma, feat = self.spatial(flat, check=check)
        enc_d = encode(self.pe_dir, np.repeat(dirs, n, axis=0))
        rgb = self.color(feat, enc_d, check=check)
        return (T.reshape(sigma, (b, n)),
                T.reshape(rgb, (b, n, 3)),
                T.reshape(feat, (b, n, self.cfg.feature_dim)))


def _finite(t: T.Tensor, where: str):
    if not np.isfinite(t.values.sum()):
        raise NumericFault(f"non-finite activations at {where}")


def render_ray(sigma: T.Tensor, attr: T.Tensor, deltas):
    """Transmittance-weighted accumulation along each ray.

    sigma:[B,N] (>=0), attr:[B,N,C], deltas:[B,N] (>0) ->
    (rendered [B,C], weights [B,N]) where
    weights_i = exp(-sum_{j<i} d_j s_j) * (1 - exp(-d_i s_i)).
    The same operation renders color and semantic features.
    """
    sigma = T.as_tensor(sigma)
    attr = T.as_tensor(attr)
    deltas = T.as_tensor(deltas)
    if sigma.shape != deltas.shape or sigma.shape != attr.shape[:2]:
        raise ShapeError(
            f"render_ray: shapes {sigma.shape}, {attr.shape}, {deltas.shape}")
    if sigma.values.min(initial=0.0) < 0:
        raise DomainError("render_ray: negative density")
    if deltas.values.min() <= 0:
        raise DomainError("render_ray: intervals must be positive")
    optical = T.mul(sigma, deltas)
    trans = T.exp(T.neg(T.cumsum_exclusive(optical, axis=1)))
    alpha = T.add_const(T.neg(T.exp(T.neg(optical))), 1.0)
    weights = T.mul(trans, alpha)
    return T.weighted_sum(weights, attr), weights


def rgb_loss(pred: T.Tensor, target) -> T.Tensor:
    """Sum over rays of the squared color error."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"rgb_loss: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    return T.tensor_sum(T.mul(diff, diff))
