"""Texture extractor: a small stride-1 conv stack producing a dense feature
map at input resolution, plus the per-pixel gather that aligns features with
training rays and a linear classifier for the CNN-path supervision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError
from .field import Linear, _glorot


@dataclass
class CnnConfig:
    channels: int = 32     # feature channels Fc, fixed across scenes
    stages: int = 4        # 3x3 conv stages, stride 1, zero same-padding
    num_classes: int = 5


class TextureCnn:
    """Stride-1 same-padding conv stack 3 -> c -> ... -> c, ReLU between
    stages, linear final stage.  Receptive-field radius = stages."""

    def __init__(self, cfg: CnnConfig, rng):
        self.cfg = cfg
        c = cfg.channels
        dims = [3] + [c] * cfg.stages
        self.kernels = []
        self.biases = []
        for i, (ci, co) in enumerate(zip(dims[:-1], dims[1:])):
            fan_in, fan_out = 9 * ci, 9 * co
            k = _glorot(rng, fan_in, co).reshape(3, 3, ci, co)
            self.kernels.append(T.parameter(k, name=f"cnn/conv{i}/k"))
            self.biases.append(T.parameter(np.zeros(co), name=f"cnn/conv{i}/b"))
        self.classifier = Linear(rng, c, cfg.num_classes, "cnn/classifier")

    @property
    def receptive_radius(self) -> int:
        return self.cfg.stages

    def params(self):
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend([k, b])
        out.extend(self.classifier.params())
        return out

    def forward(self, image) -> T.Tensor:
        """image:[H,W,3] in [0,1] -> feature map [H,W,Fc]; deterministic."""
        img = T.as_tensor(image)
        if img.values.ndim != 3 or img.shape[2] != 3:
            raise DomainError(f"expected [H,W,3] image, got {img.shape}")
        if img.values.min() < 0.0 or img.values.max() > 1.0:
            raise DomainError("image values must lie in [0, 1]")
        h = img
        last = len(self.kernels) - 1
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            h = T.conv2d(h, k, b)
            if i != last:
                h = T.relu(h)
        return h

    def classify(self, feats: T.Tensor) -> T.Tensor:
        """Per-ray CNN logits for the auxiliary supervision."""
        return self.classifier(feats)


def gather_ray_features(feat_map: T.Tensor, pixels: np.ndarray) -> T.Tensor:
    """Exact per-pixel gather: feat_map:[H,W,Fc], pixels:[B,2] integer (u,v).

    Rays are cast through pixel centers, so no interpolation is involved.
    """
    pixels = np.asarray(pixels)
    h, w, fc = feat_map.shape
    u, v = pixels[:, 0], pixels[:, 1]
    if (u.min(initial=0) < 0 or v.min(initial=0) < 0
            or (pixels.size and (u.max() >= w or v.max() >= h))):
        raise DomainError("pixel coordinates outside the feature map")
    flat = T.reshape(feat_map, (h * w, fc))
    return T.take_rows(flat, v * w + u)
