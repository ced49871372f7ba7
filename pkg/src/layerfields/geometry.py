"""Pinhole cameras, rays, and sample-point generation along rays.

Conventions: right-handed world, cameras look down their local -z axis,
pixel x grows right and pixel y grows down. Pixel coordinates are
continuous; pass ``index + 0.5`` to shoot through a pixel's center.
All functions are pure; randomness comes from an explicitly passed
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid cam-to-world pose and ray bounds."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray  # (4, 4) row-major rigid transform
    t_near: float = 0.1
    t_far: float = 10.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        mat = np.asarray(self.cam_to_world, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError("cam_to_world must be a 4x4 matrix")
        rot = mat[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block of cam_to_world is not orthonormal")
        if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("bottom row of cam_to_world must be (0, 0, 0, 1)")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")
        object.__setattr__(self, "cam_to_world", mat)

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "cam_to_world": self.cam_to_world.tolist(),
            "t_near": self.t_near,
            "t_far": self.t_far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            cam_to_world=np.asarray(d["cam_to_world"], dtype=np.float64),
            t_near=float(d["t_near"]),
            t_far=float(d["t_far"]),
        )


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction and marching bounds."""

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit length
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("origin and direction must be 3-vectors")
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class SamplePoint:
    """One integration station along a ray."""

    t: float
    x: np.ndarray  # (3,)
    delta: float


def generate_rays(camera: Camera, px: np.ndarray, jitter: np.ndarray | None = None):
    """Rays through continuous pixel coordinates ``px`` of shape (..., 2).

    Returns (origins, directions), both (..., 3) float64, directions unit.
    ``jitter`` is an optional sub-pixel offset of the same shape as px.
    """
    px = np.asarray(px, dtype=np.float64)
    if px.shape[-1] != 2:
        raise ValueError("px must have shape (..., 2)")
    if np.any(px[..., 0] < 0) or np.any(px[..., 0] > camera.width) or np.any(
        px[..., 1] < 0
    ) or np.any(px[..., 1] > camera.height):
        raise ValueError("pixel coordinates outside image bounds")
    if jitter is not None:
        px = px + np.asarray(jitter, dtype=np.float64)
    x = (px[..., 0] - camera.cx) / camera.fx
    y = -(px[..., 1] - camera.cy) / camera.fy
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def generate_ray(camera: Camera, px, jitter=None) -> Ray:
    """Single ray through pixel coordinate ``px`` (2-vector)."""
    px = np.asarray(px, dtype=np.float64).reshape(2)
    j = None if jitter is None else np.asarray(jitter, dtype=np.float64).reshape(2)
    origins, dirs = generate_rays(camera, px[None], None if j is None else j[None])
    return Ray(origins[0], dirs[0], camera.t_near, camera.t_far)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates (index + 0.5)."""
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def camera_rays(camera: Camera):
    """Origins/directions for every pixel center, each (H*W, 3)."""
    px = pixel_centers(camera.width, camera.height).reshape(-1, 2)
    return generate_rays(camera, px)


def sample_segments(
    t_near,
    t_far,
    n: int,
    rng: np.random.Generator | None = None,
    count: int | None = None,
    dtype=np.float64,
):
    """Sample t stations and segment lengths between the ray bounds.

    One draw per equal-width bin of [t_near, t_far]; with ``rng=None`` the
    deterministic midpoint of each bin is used instead. ``delta[j]`` is
    ``t[j+1] - t[j]`` and the last delta closes against t_far.

    ``t_near``/``t_far`` may be scalars or (B,) arrays; ``count`` forces a
    batch dimension when the bounds are scalar. Returns (t, delta), each of
    shape (n,) or (B, n).
    """
    if n < 1:
        raise ValueError("sample count must be >= 1")
    t_near = np.asarray(t_near, dtype=dtype)
    t_far = np.asarray(t_far, dtype=dtype)
    batched = t_near.ndim > 0 or count is not None
    b = count if count is not None else (t_near.shape[0] if t_near.ndim else 1)
    t_near = np.broadcast_to(t_near, (b,))
    t_far = np.broadcast_to(t_far, (b,))
    if np.any(t_near >= t_far):
        raise ValueError("require t_near < t_far")
    width = (t_far - t_near)[:, None] / n
    edges = t_near[:, None] + width * np.arange(n, dtype=dtype)
    if rng is None:
        offs = np.full((b, n), 0.5, dtype=dtype)
    else:
        offs = rng.random((b, n), dtype=np.dtype(dtype))
    t = edges + offs * width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = t_far - t[:, -1]
    if not batched:
        return t[0], delta[0]
    return t, delta


def stratified_samples(ray: Ray, n: int, rng: np.random.Generator | None = None) -> list[SamplePoint]:
    """Stratified (or midpoint, when rng is None) samples along one ray."""
    t, delta = sample_segments(ray.t_near, ray.t_far, n, rng=rng)
    x = ray.at(t)
    return [SamplePoint(float(t[j]), x[j], float(delta[j])) for j in range(n)]


def look_at(
    position,
    target,
    up=(0.0, 0.0, 1.0),
) -> np.ndarray:
    """cam-to-world matrix for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = position - target
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        raise ValueError("camera position coincides with target")
    z = z / norm
    x = np.cross(up, z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ValueError("view direction parallel to the up vector")
    x = x / xn
    y = np.cross(z, x)
    mat = np.eye(4)
    mat[:3, 0] = x
    mat[:3, 1] = y
    mat[:3, 2] = z
    mat[:3, 3] = position
    return mat
