"""Full-image rendering of trained fields through the reference
compositing path. Deterministic midpoint sampling unless an rng is given.
"""

from __future__ import annotations

import numpy as np

from . import compositing
from .compositing import RenderOutput
from .field import SnerfVoxelField, VoxelField
from .geometry import Camera, camera_rays, sample_segments


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _field_samples(field, origins, dirs, t):
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    sigma, color = field.query(pts)
    return pts, sigma, color


def render_rays(
    field: VoxelField,
    origins,
    dirs,
    t_near: float,
    t_far: float,
    n_samples: int = 128,
    rng: np.random.Generator | None = None,
) -> RenderOutput:
    """Composite a ray batch against a trained field."""
    nb = origins.shape[0]
    t, delta = sample_segments(t_near, t_far, n_samples, rng=rng, count=nb)
    _, sigma, color = _field_samples(field, origins, dirs, t)
    if isinstance(field, SnerfVoxelField):
        out = compositing.composite_nerf(sigma[..., 0], color[..., 0, :], delta, t=t)
        pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
        logits = compositing.composite_nerf(
            sigma[..., 0], field.query_logits(pts), delta, t=t
        ).color  # logits composited like radiance channels
        out.sem_mask = _softmax(logits)
        return out
    return compositing.composite_full(sigma, color, delta, t=t)


def render_view(
    field: VoxelField,
    camera: Camera,
    n_samples: int = 128,
    rng: np.random.Generator | None = None,
    chunk: int = 8192,
) -> RenderOutput:
    """Render a full camera view; arrays come back shaped (H, W, ...)."""
    origins, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    m = field.class_set.m
    color = np.zeros((h * w, 3))
    sem = np.zeros((h * w, m))
    depth = np.zeros(h * w)
    acc = np.zeros(h * w)
    for start in range(0, h * w, chunk):
        sl = slice(start, min(start + chunk, h * w))
        out = render_rays(
            field, origins[sl], dirs[sl], camera.t_near, camera.t_far, n_samples, rng
        )
        color[sl] = out.color
        sem[sl] = out.sem_mask
        depth[sl] = out.depth
        acc[sl] = out.acc_alpha
    return RenderOutput(
        color=color.reshape(h, w, 3),
        sem_mask=sem.reshape(h, w, m),
        depth=depth.reshape(h, w),
        acc_alpha=acc.reshape(h, w),
    )


def render_layer_view(
    field: VoxelField,
    camera: Camera,
    index: int,
    n_samples: int = 128,
    chunk: int = 8192,
) -> RenderOutput:
    """Render a single semantic layer of a view (other layers removed)."""
    origins, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    color = np.zeros((h * w, 3))
    acc = np.zeros(h * w)
    depth = np.zeros(h * w)
    for start in range(0, h * w, chunk):
        sl = slice(start, min(start + chunk, h * w))
        nb = sl.stop - sl.start
        t, delta = sample_segments(camera.t_near, camera.t_far, n_samples, count=nb)
        pts, sigma, col = _field_samples(field, origins[sl], dirs[sl], t)
        if isinstance(field, SnerfVoxelField):
            p = _softmax(field.query_logits(pts))
            out = compositing.composite_snerf_layer(
                sigma[..., 0], col[..., 0, :], p, index, delta, t=t
            )
        else:
            out = compositing.composite_layer(sigma, col, delta, index, t=t)
        color[sl] = out.color
        acc[sl] = out.acc_alpha
        depth[sl] = out.depth
    return RenderOutput(
        color=color.reshape(h, w, 3),
        sem_mask=acc.reshape(h, w)[..., None],
        depth=depth.reshape(h, w),
        acc_alpha=acc.reshape(h, w),
    )
