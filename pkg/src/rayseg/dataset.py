"""On-disk dataset format and loaders.

A scene directory holds a line-oriented ``scene.manifest`` plus ``images/``
(8-bit RGB PNG) and ``labels/`` (single-channel 8-bit class-id PNG).  Floats
in the manifest are written with ``repr`` so a write/load round trip is
bit-exact.  Views carry a ``split`` tag: ``train`` views feed optimization,
``eval`` views are held out for metrics.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (ConfigError, DomainError, ManifestMissingError,
                     ManifestSchemaError, PaletteError, RotationError)
from .geometry import Camera, rays_for_pixels

MANIFEST_NAME = "scene.manifest"


@dataclass
class ClassEntry:
    class_id: int
    name: str
    rgb: tuple  # uint8 triple, for visualization


@dataclass
class ViewRecord:
    index: int
    camera: Camera
    image_path: str
    label_path: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    scene: str
    root: str
    near: float
    far: float
    bbox: np.ndarray                    # [[xmin,ymin,zmin],[xmax,ymax,zmax]]
    background_id: int
    palette: list                       # [ClassEntry], dense ids from 0
    views: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.palette)

    def train_views(self):
        return [v for v in self.views if v.split == "train"]

    def eval_views(self):
        return [v for v in self.views if v.split == "eval"]

    def labeled_train_views(self):
        return [v for v in self.views if v.split == "train" and v.label_path]

    def load_image(self, view: ViewRecord) -> np.ndarray:
        img = Image.open(os.path.join(self.root, view.image_path)).convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0

    def load_label(self, view: ViewRecord) -> np.ndarray:
        if view.label_path is None:
            raise DomainError(f"view {view.index} has no label")
        arr = np.asarray(Image.open(os.path.join(self.root, view.label_path)))
        return arr.astype(np.int64)

    def normalize(self, positions: np.ndarray) -> np.ndarray:
        """Map the manifest bounding box to [-1, 1]^3."""
        center = (self.bbox[0] + self.bbox[1]) / 2
        half = (self.bbox[1] - self.bbox[0]) / 2
        return (positions - center) / half


def _fmt(x: float) -> str:
    return repr(float(x))


def write_manifest(manifest: DatasetManifest, path: str):
    lines = [f"scene {manifest.scene}",
             f"near {_fmt(manifest.near)}",
             f"far {_fmt(manifest.far)}",
             "bbox " + " ".join(_fmt(v) for v in np.asarray(manifest.bbox).reshape(-1)),
             f"background {manifest.background_id}"]
    for entry in manifest.palette:
        r, g, b = entry.rgb
        lines.append(f"class {entry.class_id} {entry.name} {r} {g} {b}")
    for view in manifest.views:
        cam = view.camera
        lines.append(f"view {view.index}")
        lines.append(f"  split {view.split}")
        lines.append(f"  image {view.image_path}")
        if view.label_path:
            lines.append(f"  label {view.label_path}")
        lines.append(f"  size {cam.width} {cam.height}")
        lines.append("  intrinsics " + " ".join(
            _fmt(v) for v in (cam.f, cam.dx, cam.dy, cam.u0, cam.v0)))
        lines.append("  rotation " + " ".join(_fmt(v) for v in cam.R.reshape(-1)))
        lines.append("  translation " + " ".join(_fmt(v) for v in cam.t))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_image(path: str, rgb: np.ndarray):
    """rgb float [H,W,3] in [0,1] -> 8-bit PNG."""
    arr = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_label(path: str, ids: np.ndarray):
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 255:
        raise DomainError("label ids must fit in uint8")
    Image.fromarray(ids.astype(np.uint8), mode="L").save(path)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    fixed = u @ vt
    if np.linalg.det(fixed) < 0:
        raise RotationError("rotation determinant is not +1")
    drift = float(np.abs(fixed - r).max())
    if drift > 1e-6:
        raise RotationError(f"rotation drift {drift:.3e} exceeds 1e-6")
    return fixed


def load_manifest(directory: str) -> DatasetManifest:
    """Parse and fully validate ``<directory>/scene.manifest``.

    Rotations within 1e-6 of orthonormal are re-orthonormalized; anything
    worse is rejected.  Label images are decoded to confirm dimensions match
    their view and that every id exists in the (dense) palette.
    """
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise ManifestMissingError(f"no manifest at {path}")
    scene = None
    near = far = None
    bbox = None
    background = None
    palette = []
    views = []
    current: dict | None = None

    def close_view():
        nonlocal current
        if current is None:
            return
        missing = {"image", "size", "intrinsics", "rotation", "translation"} - set(current)
        if missing:
            raise ManifestSchemaError(
                f"view {current['index']} missing fields: {sorted(missing)}")
        w, h = current["size"]
        f, dx, dy, u0, v0 = current["intrinsics"]
        try:
            cam = Camera(f=f, dx=dx, dy=dy, u0=u0, v0=v0,
                         R=_orthonormalize(current["rotation"]),
                         t=current["translation"], width=w, height=h)
        except DomainError as exc:
            raise ManifestSchemaError(f"view {current['index']}: {exc}") from exc
        views.append(ViewRecord(index=current["index"], camera=cam,
                                image_path=current["image"],
                                label_path=current.get("label"),
                                split=current.get("split", "train")))
        current = None

    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            indented = line[0].isspace()
            parts = line.split()
            key, args = parts[0], parts[1:]
            try:
                if not indented:
                    if key == "view":
                        close_view()
                        current = {"index": int(args[0])}
                    elif key == "scene":
                        scene = " ".join(args)
                    elif key == "near":
                        near = float(args[0])
                    elif key == "far":
                        far = float(args[0])
                    elif key == "bbox":
                        bbox = np.array([float(a) for a in args]).reshape(2, 3)
                    elif key == "background":
                        background = int(args[0])
                    elif key == "class":
                        palette.append(ClassEntry(int(args[0]), args[1],
                                                  tuple(int(a) for a in args[2:5])))
                    else:
                        raise ManifestSchemaError(f"unknown key {key!r} on line {lineno}")
                else:
                    if current is None:
                        raise ManifestSchemaError(f"field outside view on line {lineno}")
                    if key == "split":
                        if args[0] not in ("train", "eval"):
                            raise ManifestSchemaError(f"bad split {args[0]!r}")
                        current["split"] = args[0]
                    elif key in ("image", "label"):
                        current[key] = args[0]
                    elif key == "size":
                        current["size"] = (int(args[0]), int(args[1]))
                    elif key == "intrinsics":
                        current["intrinsics"] = tuple(float(a) for a in args)
                    elif key == "rotation":
                        current["rotation"] = np.array(
                            [float(a) for a in args]).reshape(3, 3)
                    elif key == "translation":
                        current["translation"] = np.array([float(a) for a in args])
                    else:
                        raise ManifestSchemaError(f"unknown view key {key!r} on line {lineno}")
            except (ValueError, IndexError) as exc:
                raise ManifestSchemaError(f"line {lineno}: {exc}") from exc
    close_view()

    if scene is None or near is None or far is None or bbox is None or background is None:
        raise ManifestSchemaError("manifest missing scene/near/far/bbox/background")
    if not (0 < near < far):
        raise ManifestSchemaError(f"need 0 < near < far, got {near}, {far}")
    ids = sorted(e.class_id for e in palette)
    if ids != list(range(len(ids))):
        raise PaletteError(f"palette ids must be dense from 0, got {ids}")
    if background >= len(ids):
        raise PaletteError(f"background id {background} not in palette")

    manifest = DatasetManifest(scene=scene, root=directory, near=near, far=far,
                               bbox=bbox, background_id=background,
                               palette=palette, views=views)
    _validate_files(manifest)
    return manifest


def _validate_files(manifest: DatasetManifest):
    for view in manifest.views:
        img_path = os.path.join(manifest.root, view.image_path)
        if not os.path.isfile(img_path):
            raise ManifestMissingError(f"missing image {img_path}")
        with Image.open(img_path) as img:
            if img.size != (view.camera.width, view.camera.height):
                raise ManifestSchemaError(
                    f"view {view.index}: image size {img.size} != camera "
                    f"{(view.camera.width, view.camera.height)}")
        if view.label_path:
            lab_path = os.path.join(manifest.root, view.label_path)
            if not os.path.isfile(lab_path):
                raise ManifestMissingError(f"missing label {lab_path}")
            with Image.open(lab_path) as lab:
                if lab.size != (view.camera.width, view.camera.height):
                    raise ManifestSchemaError(
                        f"view {view.index}: label size {lab.size} != image")
            ids = np.unique(manifest.load_label(view))
            if ids.min() < 0 or ids.max() >= manifest.num_classes:
                raise PaletteError(
                    f"view {view.index}: label ids {ids.tolist()} outside palette")


@dataclass
class RayBatch:
    view_index: int
    pixels: np.ndarray       # [B,2] integer (u, v)
    origins: np.ndarray      # [B,3]
    dirs: np.ndarray         # [B,3] unit
    rgb: np.ndarray | None   # [B,3] color targets (color stage)
    labels: np.ndarray | None  # [B] class ids (seg stage)


class _ViewCache:
    """Per-view pixel targets, loaded once."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.images: dict = {}
        self.labels: dict = {}

    def image(self, view: ViewRecord) -> np.ndarray:
        if view.index not in self.images:
            self.images[view.index] = self.manifest.load_image(view)
        return self.images[view.index]

    def label(self, view: ViewRecord) -> np.ndarray:
        if view.index not in self.labels:
            self.labels[view.index] = self.manifest.load_label(view)
        return self.labels[view.index]


def sample_batch(manifest: DatasetManifest, stage: str, batch: int, rng,
                 cache: _ViewCache | None = None) -> RayBatch:
    """One training batch per the two-stage recipe: pick a view uniformly
    (all train views for ``color``, labeled train views for ``seg``), then
    ``batch`` uniform pixels of that view."""
    if stage == "color":
        candidates = manifest.train_views()
    elif stage == "seg":
        candidates = manifest.labeled_train_views()
        if not candidates:
            raise ConfigError("seg stage needs at least one labeled train view")
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    if not candidates:
        raise ConfigError("manifest has no train views")
    cache = cache or _ViewCache(manifest)
    view = candidates[int(rng.integers(len(candidates)))]
    cam = view.camera
    u = rng.integers(0, cam.width, size=batch)
    v = rng.integers(0, cam.height, size=batch)
    pixels = np.stack([u, v], axis=1)
    origins, dirs = rays_for_pixels(cam, pixels.astype(np.float64),
                                    near=manifest.near, far=manifest.far)
    if stage == "color":
        img = cache.image(view)
        return RayBatch(view.index, pixels, origins, dirs, img[v, u], None)
    lab = cache.label(view)
    return RayBatch(view.index, pixels, origins, dirs, None, lab[v, u])


def ray_epoch_sampler(manifest: DatasetManifest, stage: str, batch: int, rng):
    """Endless stream of training batches; single producer, shared cache."""
    cache = _ViewCache(manifest)
    while True:
        yield sample_batch(manifest, stage, batch, rng, cache)
