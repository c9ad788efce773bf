"""Pinhole camera model, pixel/world conversions, and ray-point sampling.

Conventions: pixel (u, v) with u along image columns and v along rows,
origin at the top-left; integer coordinates land on pixel centers.  The
camera frame is right-handed with x right, y down, and the optical axis +z,
so a world point maps through X_c = R @ X_w + t, then perspective division
by z_c, then the pixel-pitch/principal-point affine map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DomainError, RotationError

_ORTHO_TOL = 1e-9


@dataclass
class Camera:
    f: float          # focal length, in pixels when dx = dy = 1
    dx: float         # pixel pitch along u (length per pixel)
    dy: float         # pixel pitch along v
    u0: float         # principal point, pixels
    v0: float
    R: np.ndarray     # 3x3 world-to-camera rotation
    t: np.ndarray     # 3-vector world-to-camera translation
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.R.shape != (3, 3):
            raise RotationError(f"rotation must be 3x3, got {self.R.shape}")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > _ORTHO_TOL:
            raise RotationError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise RotationError("rotation determinant is not +1")
        if self.f <= 0 or self.dx <= 0 or self.dy <= 0:
            raise DomainError("focal length and pixel pitch must be positive")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise DomainError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.R.T @ self.t


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray     # unit norm
    near: float
    far: float
    view_angles: tuple = field(default=None)  # (azimuth, elevation), radians

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise DomainError(f"ray direction norm {n} is not 1")
        if not (0 < self.near < self.far):
            raise DomainError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.view_angles is None:
            d = self.direction
            self.view_angles = (float(np.arctan2(d[1], d[0])),
                                float(np.arcsin(np.clip(d[2], -1.0, 1.0))))


@dataclass
class RaySampleBatch:
    positions: np.ndarray    # [B, N, 3] world coordinates
    deltas: np.ndarray       # [B, N] interval widths, positive
    depths: np.ndarray       # [B, N] distances along each ray
    ray_index: np.ndarray    # [B] indices into the source ray list
    stage: str               # "coarse" | "fine"


def pixel_to_camera_ray(cam: Camera, u: float, v: float,
                        near: float = 1e-3, far: float = 1e6) -> Ray:
    """Ray from the camera center through pixel (u, v).

    Inverts the pixel->image affine map (pitch and principal point), then the
    perspective map at z_c = 1, then the world-to-camera rigid transform.
    """
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise DomainError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height}")
    o, d = _pixel_rays(cam, np.array([[u, v]], dtype=np.float64))
    return Ray(o, d[0], near=near, far=far)


def _pixel_rays(cam: Camera, uv: np.ndarray):
    """Vectorized ray directions for float pixel coordinates uv:[B,2].

    Returns (origin [3], unit directions [B,3]); no bounds check.
    """
    x = (uv[:, 0] - cam.u0) * cam.dx
    y = (uv[:, 1] - cam.v0) * cam.dy
    d_cam = np.stack([x / cam.f, y / cam.f, np.ones(len(uv))], axis=1)
    d_world = d_cam @ cam.R           # == (R^T @ d_cam^T)^T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return cam.center, d_world


def rays_for_pixels(cam: Camera, uv: np.ndarray, near: float, far: float):
    """Batched ray generation: origins [B,3], unit dirs [B,3]."""
    uv = np.asarray(uv, dtype=np.float64)
    if (uv[:, 0].min(initial=0) < 0 or uv[:, 1].min(initial=0) < 0
            or (len(uv) and (uv[:, 0].max() >= cam.width or uv[:, 1].max() >= cam.height))):
        raise DomainError("pixel coordinates outside the image")
    if not (0 < near < far):
        raise DomainError(f"need 0 < near < far, got {near}, {far}")
    origin, dirs = _pixel_rays(cam, uv)
    return np.broadcast_to(origin, dirs.shape).copy(), dirs


def world_to_pixel(cam: Camera, p: np.ndarray):
    """Project a world point; returns (u, v, depth) with depth = z_c."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    pc = cam.R @ p + cam.t
    if pc[2] <= 0:
        raise BehindCameraError(f"point has z_c = {pc[2]:.6g}")
    x = cam.f * pc[0] / pc[2]
    y = cam.f * pc[1] / pc[2]
    u = x / cam.dx + cam.u0
    v = y / cam.dy + cam.v0
    return float(u), float(v), float(pc[2])


def world_to_pixel_batch(cam: Camera, pts: np.ndarray):
    """Vectorized projection of pts:[B,3] -> (uv:[B,2], depth:[B])."""
    pc = pts @ cam.R.T + cam.t
    z = pc[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("points behind the camera")
    u = cam.f * pc[:, 0] / z / cam.dx + cam.u0
    v = cam.f * pc[:, 1] / z / cam.dy + cam.v0
    return np.stack([u, v], axis=1), z


def _ray_arrays(rays):
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    near = np.array([r.near for r in rays])
    far = np.array([r.far for r in rays])
    return origins, dirs, near, far


def sample_coarse(rays, n: int = 64, jitter: bool = False, rng=None) -> RaySampleBatch:
    """Stratified depths over [near, far]: one sample per uniform bin.

    With ``jitter`` each depth is drawn uniformly inside its bin (needs rng);
    otherwise bin centers.  deltas[i] = depth[i+1] - depth[i]; the last delta
    is the mean bin width, keeping rendering weights finite.
    """
    origins, dirs, near, far = _ray_arrays(rays)
    return sample_coarse_arrays(origins, dirs, near, far, n, jitter, rng)


def sample_coarse_arrays(origins, dirs, near, far, n: int = 64,
                         jitter: bool = False, rng=None) -> RaySampleBatch:
    """Array-in variant of :func:`sample_coarse` for hot loops."""
    if n < 2:
        raise DomainError("need at least 2 samples per ray")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (len(origins),))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (len(origins),))
    b = len(origins)
    width = (far - near)[:, None] / n
    lo = near[:, None] + width * np.arange(n)
    if jitter:
        u = rng.random((b, n))
    else:
        u = 0.5
    depths = lo + width * u
    deltas = np.concatenate([np.diff(depths, axis=1), width], axis=1)
    positions = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    return RaySampleBatch(positions, deltas, depths, np.arange(b), "coarse")


def sample_fine(rays, coarse: RaySampleBatch, coarse_weights: np.ndarray,
                n: int = 192, rng=None) -> RaySampleBatch:
    """Importance resampling by inverse-CDF over the coarse bins.

    The PDF is piecewise constant, proportional to coarse_weights + 1e-5 per
    bin (the floor makes all-zero weights fall back to uniform).  With ``rng``
    the n CDF positions are uniform draws; without, stratified midpoints, so
    the result is deterministic.  Output depths are sorted ascending.
    """
    origins, dirs, near, far = _ray_arrays(rays)
    return sample_fine_arrays(origins, dirs, near, far, coarse_weights, n, rng)


def sample_fine_arrays(origins, dirs, near, far, coarse_weights: np.ndarray,
                       n: int = 192, rng=None) -> RaySampleBatch:
    """Array-in variant of :func:`sample_fine` for hot loops."""
    if np.any(coarse_weights < 0):
        raise DomainError("importance weights must be nonnegative")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (len(origins),))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (len(origins),))
    b, nc = coarse_weights.shape
    w = coarse_weights + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((b, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is not None:
        u = rng.random((b, n))
    else:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (b, n)).copy()

    # Row-offset trick: one flat searchsorted over all rays.
    offsets = np.arange(b)[:, None].astype(np.float64)
    flat_cdf = (cdf + 2.0 * offsets).reshape(-1)
    flat_u = (u + 2.0 * offsets).reshape(-1)
    idx = np.searchsorted(flat_cdf, flat_u, side="right").reshape(b, n)
    idx = idx - np.arange(b)[:, None] * (nc + 1) - 1
    idx = np.clip(idx, 0, nc - 1)

    bin_width = (far - near)[:, None] / nc
    rows = np.arange(b)[:, None]
    cdf_lo = cdf[rows, idx]
    frac = (u - cdf_lo) / np.maximum(pdf[rows, idx], 1e-300)
    frac = np.clip(frac, 0.0, 1.0)
    depths = near[:, None] + (idx + frac) * bin_width
    depths = np.sort(depths, axis=1)

    fine_width = (far - near)[:, None] / n
    deltas = np.concatenate([np.diff(depths, axis=1), fine_width], axis=1)
    positions = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    return RaySampleBatch(positions, deltas, depths, np.arange(b), "fine")


def random_camera(rng, width: int = 64, height: int = 64) -> Camera:
    """A valid random camera; handy for round-trip property tests."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    return Camera(
        f=float(rng.uniform(0.5, 4.0) * width),
        dx=float(rng.uniform(0.5, 2.0)),
        dy=float(rng.uniform(0.5, 2.0)),
        u0=float(rng.uniform(0.25, 0.75) * width),
        v0=float(rng.uniform(0.25, 0.75) * height),
        R=q,
        t=rng.uniform(-5, 5, 3),
        width=width,
        height=height,
    )


def look_at_camera(position, target, f: float, width: int, height: int,
                   dx: float = 1.0, dy: float = 1.0) -> Camera:
    """Camera at ``position`` with optical axis toward ``target``, world z up."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight up/down: pick an arbitrary horizontal right
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return Camera(f=f, dx=dx, dy=dy, u0=(width - 1) / 2.0, v0=(height - 1) / 2.0,
                  R=rot, t=-rot @ position, width=width, height=height)
