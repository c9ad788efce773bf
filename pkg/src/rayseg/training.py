"""Two-stage training orchestration.

Stage 1 fits the color field to all posed train views (coarse render,
importance resample, fine render, squared-error loss on both).  Stage 2
loads a stage-1 checkpoint, freezes the spatial trunk, and optimizes the
ray transformer / texture CNN / seg-head on the labeled views only.

Determinism: every random draw comes from a generator seeded by
``(seed, stream, step)``, so runs are bitwise reproducible and a resumed run
continues exactly where the checkpoint left off — no RNG state needs saving.
Optimizer moments and the step counter ride inside the checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .cnn import CnnConfig, TextureCnn, gather_ray_features
from .dataset import DatasetManifest, _ViewCache, sample_batch
from .errors import (CapabilityError, CheckpointError, ConfigError,
                     NumericFault)
from .field import ColorField, FieldConfig, render_ray, rgb_loss
from .geometry import rays_for_pixels, sample_coarse_arrays, sample_fine_arrays
from .metrics import ConfusionMatrix, miou, psnr
from .transformer import (RayTransformer, SegHead, TransformerConfig, Variant,
                          one_hot, render_semantic, seg_loss, select_valid)

VARIANT_CODES = {"B": 0, "RT": 1, "RTT": 2, "RTC": 3, "RTTC": 4}
CODE_VARIANTS = {v: k for k, v in VARIANT_CODES.items()}

# rng stream tags
_INIT_FIELD, _INIT_SEG = 100, 200
_STEP_COLOR, _STEP_SEG = 1, 2


@dataclass
class TrainConfig:
    # stage 1
    iterations_1: int = 20000
    lr_1: float = 5e-4
    # stage 2
    iterations_2: int = 5000
    lr_2: float = 5e-4
    variant: str = "RTTC"
    # shared optimization
    batch: int = 1024
    lr_decay: float = 0.1        # lr multiplier reached at the last step
    seed: int = 0
    ckpt_every: int = 5000
    eval_every: int = 1000
    eval_views: int = 4
    workers: int = 1
    grad_chunk: int = 256        # rays per private tape / worker task
    # point sampling
    n_coarse: int = 64
    n_fine: int = 192
    jitter: bool = True
    # color field
    pe_pos: int = 10
    pe_dir: int = 4
    trunk_layers: int = 6
    trunk_width: int = 128
    skip_at: int = 3
    dir_width: int = 64
    # stage-2 model
    k_points: int = 10
    rt_layers: int = 2
    rt_heads: int = 4
    rt_dim: int = 64
    rt_ffn_mult: int = 2
    sem_dim: int = 64
    cnn_channels: int = 32
    cnn_stages: int = 4

    def __post_init__(self):
        if self.iterations_1 < 0 or self.iterations_2 < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.variant not in VARIANT_CODES:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.k_points < 1 or self.k_points > self.n_fine:
            raise ConfigError("k_points must lie in [1, n_fine]")

    def field_config(self) -> FieldConfig:
        return FieldConfig(pe_pos=self.pe_pos, pe_dir=self.pe_dir,
                           trunk_layers=self.trunk_layers,
                           trunk_width=self.trunk_width, skip_at=self.skip_at,
                           dir_width=self.dir_width)

    def transformer_config(self, num_classes: int) -> TransformerConfig:
        return TransformerConfig(feature_dim=self.trunk_width,
                                 num_classes=num_classes,
                                 cnn_dim=self.cnn_channels,
                                 num_layers=self.rt_layers,
                                 num_heads=self.rt_heads,
                                 model_dim=self.rt_dim,
                                 ffn_mult=self.rt_ffn_mult,
                                 sem_dim=self.sem_dim)

    def to_json(self, path: str):
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2)

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def step_rng(seed: int, stream: int, step: int):
    return np.random.default_rng([seed, stream, step])


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.values) for n, p in self.params}
        self.v = {n: np.zeros_like(p.values) for n, p in self.params}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state_tensors(self, prefix: str) -> dict:
        out = {f"{prefix}/t": np.array(float(self.t))}
        for name, _ in self.params:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict, prefix: str):
        self.t = int(tensors[f"{prefix}/t"])
        for name, _ in self.params:
            self.m[name] = tensors[f"{prefix}/m/{name}"].copy()
            self.v[name] = tensors[f"{prefix}/v/{name}"].copy()


def _decayed_lr(base: float, decay: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * decay ** (step / (total - 1))


def _named(params):
    return [(p.name, p) for p in params]


class _Logger:
    def __init__(self, path: str | None, echo=None):
        self.path = path
        self.lines = []
        self.echo = echo

    def log(self, line: str):
        self.lines.append(line)
        if self.echo:
            self.echo(line)
        if self.path and len(self.lines) % 200 == 0:
            self.flush()

    def flush(self):
        if self.path:
            with open(self.path, "w") as fh:
                fh.write("\n".join(self.lines) + ("\n" if self.lines else ""))


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def _field_meta(cfg: TrainConfig, manifest: DatasetManifest) -> dict:
    return {
        "meta/kind": np.array(1.0),
        "meta/pe_pos": np.array(float(cfg.pe_pos)),
        "meta/pe_dir": np.array(float(cfg.pe_dir)),
        "meta/trunk_layers": np.array(float(cfg.trunk_layers)),
        "meta/trunk_width": np.array(float(cfg.trunk_width)),
        "meta/skip_at": np.array(float(cfg.skip_at)),
        "meta/dir_width": np.array(float(cfg.dir_width)),
        "meta/n_coarse": np.array(float(cfg.n_coarse)),
        "meta/n_fine": np.array(float(cfg.n_fine)),
        "meta/bbox": np.asarray(manifest.bbox),
        "meta/near": np.array(manifest.near),
        "meta/far": np.array(manifest.far),
    }


def _check_bounds_match(tensors: dict, manifest: DatasetManifest):
    if (not np.array_equal(tensors["meta/bbox"], manifest.bbox)
            or float(tensors["meta/near"]) != manifest.near
            or float(tensors["meta/far"]) != manifest.far):
        raise ConfigError("checkpoint bounds do not match the manifest")


_ARCH_KEYS = ("pe_pos", "pe_dir", "trunk_layers", "trunk_width", "skip_at",
              "dir_width")


def _check_arch_match(tensors: dict, cfg: TrainConfig):
    for key in _ARCH_KEYS:
        if int(tensors[f"meta/{key}"]) != getattr(cfg, key):
            raise ConfigError(
                f"config {key}={getattr(cfg, key)} does not match checkpoint "
                f"{key}={int(tensors[f'meta/{key}'])}")


def _field_from_meta(tensors: dict) -> ColorField:
    cfg = FieldConfig(pe_pos=int(tensors["meta/pe_pos"]),
                      pe_dir=int(tensors["meta/pe_dir"]),
                      trunk_layers=int(tensors["meta/trunk_layers"]),
                      trunk_width=int(tensors["meta/trunk_width"]),
                      skip_at=int(tensors["meta/skip_at"]),
                      dir_width=int(tensors["meta/dir_width"]))
    field = ColorField(cfg, np.random.default_rng(0))
    for p in field.params():
        if p.name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {p.name}")
        if p.values.shape != tensors[p.name].shape:
            raise CheckpointError(f"checkpoint tensor {p.name} has shape "
                                  f"{tensors[p.name].shape}, expected {p.values.shape}")
        p.values = tensors[p.name].copy()
    return field


def _grad_sweep(tapes_and_losses, params):
    """Merge private gradient dicts into .grad in task order (single reducer)."""
    for tape, loss in tapes_and_losses:
        grads = tape.gradients(loss)
        grads.pop("_tensors", None)
        for p in params:
            g = grads.get(id(p))
            if g is None:
                continue
            if p.grad is None:
                p.grad = g
            else:
                p.grad += g


def _color_chunk(field, manifest, cfg, origins, dirs, targets, rng):
    b = len(origins)
    with T.Tape() as tape:
        coarse = sample_coarse_arrays(origins, dirs, manifest.near, manifest.far,
                                      cfg.n_coarse, jitter=cfg.jitter, rng=rng)
        sigma_c, color_c, _ = field.forward(manifest.normalize(coarse.positions), dirs)
        rgb_c, w_c = render_ray(sigma_c, color_c, coarse.deltas)
        fine = sample_fine_arrays(origins, dirs, manifest.near, manifest.far,
                                  w_c.values, cfg.n_fine,
                                  rng=rng if cfg.jitter else None)
        sigma_f, color_f, _ = field.forward(manifest.normalize(fine.positions), dirs)
        rgb_f, _ = render_ray(sigma_f, color_f, fine.deltas)
        target_t = T.Tensor(targets)
        loss = T.add(rgb_loss(rgb_c, target_t), rgb_loss(rgb_f, target_t))
    return tape, loss


def _run_chunks(fn, n_rays: int, chunk: int, workers: int):
    """Run fn(lo, hi) over contiguous chunks; ordered results."""
    spans = [(lo, min(lo + chunk, n_rays)) for lo in range(0, n_rays, chunk)]
    if workers <= 1 or len(spans) == 1:
        return [fn(lo, hi) for lo, hi in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in spans]
        return [f.result() for f in futures]


def train_color(manifest: DatasetManifest, cfg: TrainConfig, out_dir: str,
                resume: str | None = None, echo=None) -> str:
    """Optimize the color field; returns the final checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "ckpt"), exist_ok=True)
    log = _Logger(os.path.join(out_dir, "train_color.log"), echo)

    start_step = 0
    field = ColorField(cfg.field_config(), step_rng(cfg.seed, _INIT_FIELD, 0))
    adam = Adam(_named(field.params()))
    if resume:
        tensors = load_checkpoint(resume)
        if int(tensors.get("meta/kind", 0)) != 1:
            raise CheckpointError("resume checkpoint is not a color checkpoint")
        _check_bounds_match(tensors, manifest)
        _check_arch_match(tensors, cfg)
        field = _field_from_meta(tensors)
        adam = Adam(_named(field.params()))
        adam.load_state(tensors, "opt")
        start_step = int(tensors["meta/step"])

    cache = _ViewCache(manifest)
    eval_list = manifest.eval_views()[: cfg.eval_views]
    final_path = os.path.join(out_dir, "color.ckpt")
    t0 = time.time()

    for step in range(start_step, cfg.iterations_1):
        rng = step_rng(cfg.seed, _STEP_COLOR, step)
        batch = sample_batch(manifest, "color", cfg.batch, rng, cache)

        def chunk_fn(lo, hi):
            crng = np.random.default_rng([cfg.seed, _STEP_COLOR, step, lo])
            return _color_chunk(field, manifest, cfg, batch.origins[lo:hi],
                                batch.dirs[lo:hi], batch.rgb[lo:hi], crng)
        results = _run_chunks(chunk_fn, cfg.batch, cfg.grad_chunk, cfg.workers)
        loss_val = float(sum(r[1].values for r in results))
        if not np.isfinite(loss_val):
            raise NumericFault(
                f"non-finite loss at step {step}, view {batch.view_index}")
        _grad_sweep(results, field.params())
        lr = _decayed_lr(cfg.lr_1, cfg.lr_decay, step, cfg.iterations_1)
        adam.step(lr)

        done = step + 1
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.iterations_1) \
                and eval_list:
            score = held_out_psnr(field, manifest, cfg, eval_list)
            log.log(f"{done} {loss_val:.6f} {score:.3f}")
        elif done % 100 == 0 or done == cfg.iterations_1:
            log.log(f"{done} {loss_val:.6f}")
        if cfg.ckpt_every and done % cfg.ckpt_every == 0 and done < cfg.iterations_1:
            _save_color(field, adam, cfg, manifest, done,
                        os.path.join(out_dir, "ckpt", f"step-{done:06d}"))

    _save_color(field, adam, cfg, manifest, cfg.iterations_1, final_path)
    log.log(f"# finished in {time.time() - t0:.1f}s")
    log.flush()
    return final_path


def _save_color(field, adam, cfg, manifest, step, path):
    tensors = _field_meta(cfg, manifest)
    tensors["meta/step"] = np.array(float(step))
    for p in field.params():
        tensors[p.name] = p.values
    tensors.update(adam.state_tensors("opt"))
    save_checkpoint(tensors, path)


def render_color_frame(field: ColorField, manifest: DatasetManifest,
                       cfg, cam, chunk: int = 512, mode: str = "rgb"):
    """Deterministic full-frame render (no jitter).  mode: rgb | depth."""
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    uv = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    origins, dirs = rays_for_pixels(cam, uv, manifest.near, manifest.far)
    out = np.empty((h * w, 3 if mode == "rgb" else 1))
    for lo in range(0, h * w, chunk):
        hi = min(lo + chunk, h * w)
        o, d = origins[lo:hi], dirs[lo:hi]
        coarse = sample_coarse_arrays(o, d, manifest.near, manifest.far,
                                      cfg.n_coarse, jitter=False)
        sigma_c, _, _ = field.spatial(
            manifest.normalize(coarse.positions).reshape(-1, 3), check=False)
        sigma_c = T.reshape(sigma_c, coarse.deltas.shape)
        _, w_c = render_ray(sigma_c, T.Tensor(np.zeros(coarse.deltas.shape + (1,))),
                            coarse.deltas)
        fine = sample_fine_arrays(o, d, manifest.near, manifest.far,
                                  w_c.values, cfg.n_fine, rng=None)
        sigma_f, color_f, _ = field.forward(manifest.normalize(fine.positions), d,
                                            check=False)
        if mode == "rgb":
            rendered, _ = render_ray(sigma_f, color_f, fine.deltas)
            out[lo:hi] = rendered.values
        else:
            rendered, wts = render_ray(sigma_f, T.Tensor(fine.depths[..., None]),
                                       fine.deltas)
            residual = 1.0 - wts.values.sum(axis=1)
            out[lo:hi] = rendered.values + residual[:, None] * manifest.far
    return out.reshape(h, w, -1) if mode == "rgb" else out.reshape(h, w)


def held_out_psnr(field, manifest, cfg, views) -> float:
    scores = []
    for view in views:
        frame = render_color_frame(field, manifest, cfg, view.camera)
        scores.append(psnr(frame, manifest.load_image(view)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

class SelectedFeatureCache:
    """Frozen-trunk per-view cache: the k selected points' features, densities
    and interval widths for every pixel, computed deterministically once."""

    def __init__(self, field: ColorField, manifest: DatasetManifest,
                 cfg, k: int, chunk: int = 512):
        self.field = field
        self.manifest = manifest
        self.cfg = cfg
        self.k = k
        self.chunk = chunk
        self._views: dict = {}

    def view(self, view) -> dict:
        if view.index not in self._views:
            self._views[view.index] = self._compute(view.camera)
        return self._views[view.index]

    def _compute(self, cam) -> dict:
        man, cfg = self.manifest, self.cfg
        h, w = cam.height, cam.width
        uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        uv = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
        origins, dirs = rays_for_pixels(cam, uv, man.near, man.far)
        n = h * w
        fd = self.field.cfg.feature_dim
        feats = np.empty((n, self.k, fd))
        sigmas = np.empty((n, self.k))
        deltas = np.empty((n, self.k))
        for lo in range(0, n, self.chunk):
            hi = min(lo + self.chunk, n)
            o, d = origins[lo:hi], dirs[lo:hi]
            coarse = sample_coarse_arrays(o, d, man.near, man.far,
                                          cfg.n_coarse, jitter=False)
            sig_c, _ = self.field.spatial(
                man.normalize(coarse.positions).reshape(-1, 3), check=False)
            sig_c = T.reshape(sig_c, coarse.deltas.shape)
            _, w_c = render_ray(sig_c, T.Tensor(np.zeros(coarse.deltas.shape + (1,))),
                                coarse.deltas)
            fine = sample_fine_arrays(o, d, man.near, man.far, w_c.values,
                                      cfg.n_fine, rng=None)
            sig_f, feat_f = self.field.spatial(
                man.normalize(fine.positions).reshape(-1, 3), check=False)
            sig_f = T.reshape(sig_f, fine.deltas.shape)
            feat_f = T.reshape(feat_f, fine.deltas.shape + (fd,))
            sel_f, sel_s, sel_d, _ = select_valid(sig_f, feat_f,
                                                  T.Tensor(fine.deltas), self.k)
            feats[lo:hi] = sel_f.values
            sigmas[lo:hi] = sel_s.values
            deltas[lo:hi] = sel_d.values
        return {"feats": feats, "sigmas": sigmas, "deltas": deltas,
                "width": w, "height": h}


class SegModel:
    """Stage-2 trainable parts for one variant."""

    def __init__(self, cfg: TrainConfig, num_classes: int, variant: Variant, rng):
        tcfg = cfg.transformer_config(num_classes)
        self.variant = variant
        self.tcfg = tcfg
        self.rt = RayTransformer(tcfg, variant, rng)
        self.head = SegHead(tcfg, variant, rng)
        self.cnn = (TextureCnn(CnnConfig(channels=cfg.cnn_channels,
                                         stages=cfg.cnn_stages,
                                         num_classes=num_classes), rng)
                    if variant.uses_cnn else None)

    def params(self):
        out = self.rt.params() + self.head.params()
        if self.cnn is not None:
            out += self.cnn.params()
        return out

    def logits_for_pixels(self, sel, pixels, image_tensor):
        """Forward pass for a pixel batch.  sel: dict arrays from the cache;
        image_tensor: constant Tensor of the source view's RGB (or None when
        the variant has no CNN).  Returns (logits, cnn_logits | None)."""
        w = sel["width"]
        flat_idx = pixels[:, 1] * w + pixels[:, 0]
        feats = T.Tensor(sel["feats"][flat_idx])
        sigmas = T.Tensor(sel["sigmas"][flat_idx])
        deltas = T.Tensor(sel["deltas"][flat_idx])
        cnn_feat = cnn_logits = None
        if self.cnn is not None:
            fmap = self.cnn.forward(image_tensor)
            cnn_feat = gather_ray_features(fmap, pixels)
            cnn_logits = self.cnn.classify(cnn_feat)
        token = cnn_feat if self.variant.uses_token else None
        sem = self.rt.forward(feats, token)
        rendered = render_semantic(sem, sigmas, deltas)
        logits = self.head.forward(rendered,
                                   cnn_feat if self.variant.uses_concat else None)
        return logits, cnn_logits


def train_seg(manifest: DatasetManifest, color_ckpt: str, cfg: TrainConfig,
              out_dir: str, resume: str | None = None, echo=None) -> str:
    """Optimize the stage-2 semantic path on the labeled train views."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "ckpt"), exist_ok=True)
    variant = Variant(cfg.variant)
    log = _Logger(os.path.join(out_dir, f"train_seg_{variant.value}.log"), echo)

    color = load_checkpoint(color_ckpt)
    if int(color.get("meta/kind", 0)) != 1:
        raise CheckpointError(f"{color_ckpt} is not a color checkpoint")
    _check_bounds_match(color, manifest)
    _check_arch_match(color, cfg)
    field = _field_from_meta(color)
    field.set_spatial_trainable(False)
    for p in field.direction_params():
        p.requires_grad = False

    num_classes = manifest.num_classes
    model = SegModel(cfg, num_classes, variant, step_rng(cfg.seed, _INIT_SEG, 0))
    adam = Adam(_named(model.params()))
    start_step = 0
    if resume:
        tensors = load_checkpoint(resume)
        if int(tensors.get("meta/kind", 0)) != 2:
            raise CheckpointError("resume checkpoint is not a seg checkpoint")
        if CODE_VARIANTS[int(tensors["meta/variant"])] != variant.value:
            raise ConfigError("resume checkpoint holds a different variant")
        for p in model.params():
            p.values = tensors[p.name].copy()
        adam.load_state(tensors, "opt2")
        start_step = int(tensors["meta/step2"])

    cache = SelectedFeatureCache(field, manifest, cfg, cfg.k_points)
    view_cache = _ViewCache(manifest)
    image_tensors: dict = {}

    def image_tensor(view):
        if view.index not in image_tensors:
            image_tensors[view.index] = T.Tensor(view_cache.image(view))
        return image_tensors[view.index]

    views_by_index = {v.index: v for v in manifest.views}
    eval_list = manifest.eval_views()[: cfg.eval_views]
    spatial_before = _spatial_fingerprint(field)
    final_path = os.path.join(out_dir, f"seg-{variant.value}.ckpt")
    t0 = time.time()

    for step in range(start_step, cfg.iterations_2):
        rng = step_rng(cfg.seed, _STEP_SEG, step)
        batch = sample_batch(manifest, "seg", cfg.batch, rng, view_cache)
        view = views_by_index[batch.view_index]
        sel = cache.view(view)
        targets = one_hot(batch.labels, num_classes)
        with T.Tape() as tape:
            logits, cnn_logits = model.logits_for_pixels(
                sel, batch.pixels,
                image_tensor(view) if model.cnn is not None else None)
            loss = seg_loss(logits, cnn_logits, targets)
        loss_val = float(loss.values)
        if not np.isfinite(loss_val):
            raise NumericFault(
                f"non-finite seg loss at step {step}, view {batch.view_index}")
        tape.backward(loss)
        adam.step(_decayed_lr(cfg.lr_2, cfg.lr_decay, step, cfg.iterations_2))

        done = step + 1
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.iterations_2) \
                and eval_list:
            mean_iou = held_out_miou(model, cache, manifest, eval_list, view_cache)
            log.log(f"{done} {loss_val:.6f} {mean_iou:.4f}")
        elif done % 100 == 0 or done == cfg.iterations_2:
            log.log(f"{done} {loss_val:.6f}")
        if cfg.ckpt_every and done % cfg.ckpt_every == 0 and done < cfg.iterations_2:
            _save_seg(field, model, adam, cfg, manifest, color, done,
                      os.path.join(out_dir, "ckpt", f"step-{done:06d}"))

    if _spatial_fingerprint(field) != spatial_before:
        raise NumericFault("frozen spatial trunk changed during stage 2")
    _save_seg(field, model, adam, cfg, manifest, color, cfg.iterations_2, final_path)
    log.log(f"# finished in {time.time() - t0:.1f}s")
    log.flush()
    return final_path


def _spatial_fingerprint(field) -> tuple:
    return tuple(p.values.tobytes() for p in field.spatial_params())


def _save_seg(field, model, adam, cfg, manifest, color_tensors, step, path):
    tensors = dict(color_tensors)
    tensors.pop("meta/step", None)
    tensors = {k: v for k, v in tensors.items() if not k.startswith("opt/")}
    tensors.update(_field_meta(cfg, manifest))
    tensors["meta/kind"] = np.array(2.0)
    tensors["meta/step2"] = np.array(float(step))
    tensors["meta/variant"] = np.array(float(VARIANT_CODES[model.variant.value]))
    tensors["meta/num_classes"] = np.array(float(model.tcfg.num_classes))
    tensors["meta/k_points"] = np.array(float(cfg.k_points))
    tensors["meta/rt_layers"] = np.array(float(cfg.rt_layers))
    tensors["meta/rt_heads"] = np.array(float(cfg.rt_heads))
    tensors["meta/rt_dim"] = np.array(float(cfg.rt_dim))
    tensors["meta/rt_ffn_mult"] = np.array(float(cfg.rt_ffn_mult))
    tensors["meta/sem_dim"] = np.array(float(cfg.sem_dim))
    tensors["meta/cnn_channels"] = np.array(float(cfg.cnn_channels))
    tensors["meta/cnn_stages"] = np.array(float(cfg.cnn_stages))
    for p in field.params():
        tensors[p.name] = p.values
    for p in model.params():
        tensors[p.name] = p.values
    tensors.update(adam.state_tensors("opt2"))
    save_checkpoint(tensors, path)


def _seg_model_from_meta(tensors: dict, num_classes: int) -> "SegModel":
    cfg = TrainConfig(
        trunk_width=int(tensors["meta/trunk_width"]),
        k_points=int(tensors["meta/k_points"]),
        rt_layers=int(tensors["meta/rt_layers"]),
        rt_heads=int(tensors["meta/rt_heads"]),
        rt_dim=int(tensors["meta/rt_dim"]),
        rt_ffn_mult=int(tensors["meta/rt_ffn_mult"]),
        sem_dim=int(tensors["meta/sem_dim"]),
        cnn_channels=int(tensors["meta/cnn_channels"]),
        cnn_stages=int(tensors["meta/cnn_stages"]),
        variant=CODE_VARIANTS[int(tensors["meta/variant"])],
    )
    model = SegModel(cfg, num_classes, Variant(cfg.variant),
                     np.random.default_rng(0))
    for p in model.params():
        if p.name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {p.name}")
        p.values = tensors[p.name].copy()
        p.requires_grad = False
    return model


def held_out_miou(model, cache, manifest, views, view_cache) -> float:
    cm = semantic_confusion(model, cache, manifest, views, view_cache)
    return miou(cm)[0]


def semantic_confusion(model, cache, manifest, views, view_cache) -> ConfusionMatrix:
    cm = ConfusionMatrix(manifest.num_classes)
    for view in views:
        pred = predict_labels(model, cache, manifest, view, view_cache)
        cm.update(view_cache.label(view), pred)
    return cm


def predict_labels(model, cache, manifest, view, view_cache,
                   chunk: int = 2048) -> np.ndarray:
    """Argmax class raster for one view (its image feeds the CNN paths)."""
    sel = cache.view(view)
    h, w = sel["height"], sel["width"]
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    image_tensor = (T.Tensor(view_cache.image(view))
                    if model.cnn is not None else None)
    out = np.empty(h * w, dtype=np.int64)
    fmap_feat = None
    if model.cnn is not None:
        fmap_feat = model.cnn.forward(image_tensor)
    for lo in range(0, h * w, chunk):
        hi = min(lo + chunk, h * w)
        pix = pixels[lo:hi]
        flat_idx = pix[:, 1] * w + pix[:, 0]
        feats = T.Tensor(sel["feats"][flat_idx])
        sigmas = T.Tensor(sel["sigmas"][flat_idx])
        deltas = T.Tensor(sel["deltas"][flat_idx])
        cnn_feat = None
        if fmap_feat is not None:
            cnn_feat = gather_ray_features(fmap_feat, pix)
        token = cnn_feat if model.variant.uses_token else None
        sem = model.rt.forward(feats, token)
        rendered = render_semantic(sem, sigmas, deltas)
        logits = model.head.forward(
            rendered, cnn_feat if model.variant.uses_concat else None)
        out[lo:hi] = np.argmax(logits.values, axis=1)
    return out.reshape(h, w)


# ---------------------------------------------------------------------------
# rendering / evaluation over checkpoints
# ---------------------------------------------------------------------------

def render_views(ckpt_path: str, manifest: DatasetManifest, views, mode: str,
                 cfg: TrainConfig | None = None):
    """Render frames for manifest views from a checkpoint.

    mode: rgb | depth | semantic.  Semantic rendering needs a stage-2
    checkpoint; its CNN consumes the view's dataset image when present and a
    freshly rendered color frame otherwise.
    """
    tensors = load_checkpoint(ckpt_path)
    kind = int(tensors.get("meta/kind", 0))
    field = _field_from_meta(tensors)
    field.set_spatial_trainable(False)
    for p in field.params():
        p.requires_grad = False
    _check_bounds_match(tensors, manifest)
    cfg = cfg or TrainConfig(n_coarse=int(tensors["meta/n_coarse"]),
                             n_fine=int(tensors["meta/n_fine"]))
    if mode in ("rgb", "depth"):
        return [render_color_frame(field, manifest, cfg, v.camera, mode=mode)
                for v in views]
    if mode != "semantic":
        raise ConfigError(f"unknown render mode {mode!r}")
    if kind != 2:
        raise CapabilityError("semantic rendering needs a stage-2 checkpoint; "
                              f"{ckpt_path} holds only the color stage")
    model = _seg_model_from_meta(tensors, int(tensors["meta/num_classes"]))
    cache = SelectedFeatureCache(field, manifest, cfg, int(tensors["meta/k_points"]))
    view_cache = _ViewCache(manifest)
    out = []
    for view in views:
        if model.cnn is not None and view.image_path is None:
            img = np.clip(render_color_frame(field, manifest, cfg, view.camera), 0, 1)
            view_cache.images[view.index] = img
        out.append(predict_labels(model, cache, manifest, view, view_cache))
    return out


def evaluate_color(ckpt_path: str, manifest: DatasetManifest, views=None):
    """[(view index, PSNR dB)] on the given (default eval) views."""
    tensors = load_checkpoint(ckpt_path)
    field = _field_from_meta(tensors)
    for p in field.params():
        p.requires_grad = False
    _check_bounds_match(tensors, manifest)
    cfg = TrainConfig(n_coarse=int(tensors["meta/n_coarse"]),
                      n_fine=int(tensors["meta/n_fine"]))
    views = views if views is not None else manifest.eval_views()
    out = []
    for view in views:
        frame = render_color_frame(field, manifest, cfg, view.camera)
        out.append((view.index, psnr(frame, manifest.load_image(view))))
    return out


def evaluate_semantic(ckpt_path: str, manifest: DatasetManifest, views=None):
    """(mean IoU, per-class IoU, confusion matrix) against view labels."""
    views = views if views is not None else manifest.eval_views()
    labeled = [v for v in views if v.label_path]
    if not labeled:
        raise ConfigError("no labeled views to evaluate against")
    preds = render_views(ckpt_path, manifest, labeled, "semantic")
    cm = ConfusionMatrix(manifest.num_classes)
    for view, pred in zip(labeled, preds):
        cm.update(manifest.load_label(view), pred)
    mean, per_class = miou(cm)
    return mean, per_class, cm
