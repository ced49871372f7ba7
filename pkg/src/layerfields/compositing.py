"""Multi-class ray compositing kernels and their analytic backward pass.

All functions operate on arrays with an arbitrary number of leading batch
dimensions: densities ``sigma`` are (..., N, M), colors are (..., N, M, 3),
segment lengths ``delta`` are (..., N), and sample distances ``t`` are
(..., N). N is the per-ray sample count, M the class count.

Transmittance is computed as a running product of per-segment
``exp(-sigma_total * delta)`` factors so the telescoping identity
``T[j+1] == T[j] * exp(-a[j])`` holds bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this total density a sample is treated as vacuum: the density-weighted
# color and the mask ratio are defined as 0, and so are their gradients.
SIGMA_EPS = 1e-12


@dataclass
class RenderOutput:
    """Per-ray compositing results (arrays share the input batch shape)."""

    color: np.ndarray  # (..., 3)
    sem_mask: np.ndarray  # (..., M)
    depth: np.ndarray  # (...)
    acc_alpha: np.ndarray  # (...)


@dataclass
class ClassRadianceSample:
    """Per-class densities and colors over one ray segment."""

    sigma: np.ndarray  # (M,) activated densities, >= 0
    color: np.ndarray  # (M, 3) activated colors in [0, 1]
    delta: float  # segment length, > 0
    t: float | None = None  # distance of the sample along the ray


@dataclass
class SnerfSample:
    """Single-density sample with per-class probabilities (baseline model)."""

    sigma: float
    color: np.ndarray  # (3,)
    p: np.ndarray  # (M,) class probabilities, sum to 1


def pack_samples(samples: list[ClassRadianceSample]):
    """Stack a per-ray sample list into (sigma, color, delta, t) arrays."""
    if not samples:
        raise ValueError("sample list must be non-empty")
    sigma = np.stack([np.asarray(s.sigma, dtype=np.float64) for s in samples])
    color = np.stack([np.asarray(s.color, dtype=np.float64) for s in samples])
    delta = np.array([s.delta for s in samples], dtype=np.float64)
    if any(s.t is None for s in samples):
        t = np.concatenate([[0.0], np.cumsum(delta[:-1])])
    else:
        t = np.array([s.t for s in samples], dtype=np.float64)
    return sigma, color, delta, t


def _default_t(delta: np.ndarray) -> np.ndarray:
    t = np.zeros_like(delta)
    t[..., 1:] = np.cumsum(delta[..., :-1], axis=-1)
    return t


def _sum_samples(x: np.ndarray) -> np.ndarray:
    """Reduction of (..., N, K) over N whose rounding is independent of the
    position of each K column (numpy's outer-axis sum is not), keeping
    class-permutation equivariance bit-exact."""
    return np.ascontiguousarray(np.swapaxes(x, -1, -2)).sum(axis=-1)


def _weights(sigma_tot: np.ndarray, delta: np.ndarray):
    """Transmittance T, per-segment alpha, and weights w = T * alpha."""
    a = sigma_tot * delta
    seg = np.exp(-a)
    trans = np.ones_like(a)
    trans[..., 1:] = np.cumprod(seg[..., :-1], axis=-1)
    alpha = -np.expm1(-a)
    return trans, alpha, trans * alpha


def transmittance(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """T[j] at segment starts; sigma may be (..., N, M) or (..., N)."""
    sigma = np.asarray(sigma)
    delta = np.asarray(delta)
    if sigma.ndim == delta.ndim + 1:
        sigma_tot, _, _, _ = _merge_classes(sigma)
    else:
        sigma_tot = sigma
    trans, _, _ = _weights(sigma_tot, delta)
    return trans


def composite_nerf(sigma, color, delta, t=None) -> RenderOutput:
    """Single-class compositing: sigma (..., N), color (..., N, 3)."""
    sigma = np.asarray(sigma)
    color = np.asarray(color)
    delta = np.asarray(delta)
    t = _default_t(delta) if t is None else np.asarray(t)
    _, _, w = _weights(sigma, delta)
    out_color = (w[..., None] * color).sum(axis=-2)
    acc = w.sum(axis=-1)
    depth = (w * t).sum(axis=-1)
    return RenderOutput(out_color, acc[..., None], depth, acc)


def _merge_classes(sigma, color=None):
    """Class merge: total density and density-weighted mean color.

    Accumulation runs in density-sorted class order, which makes the
    outputs invariant under class permutations bit-for-bit (the class
    axis is a set, so reordering it must not change results).
    """
    m = sigma.shape[-1]
    order = np.argsort(sigma, axis=-1, kind="stable")
    sigma_sorted = np.take_along_axis(sigma, order, axis=-1)
    sigma_tot = sigma_sorted[..., 0].copy()
    for i in range(1, m):
        sigma_tot += sigma_sorted[..., i]
    safe = sigma_tot > SIGMA_EPS
    inv = np.where(safe, 1.0 / np.where(safe, sigma_tot, 1.0), 0.0)
    ratio = sigma * inv[..., None]
    if color is None:
        return sigma_tot, inv, None, ratio
    color_sorted = np.take_along_axis(color, order[..., None], axis=-2)
    weighted = sigma_sorted[..., 0, None] * color_sorted[..., 0, :]
    for i in range(1, m):
        weighted = weighted + sigma_sorted[..., i, None] * color_sorted[..., i, :]
    cbar = weighted * inv[..., None]
    return sigma_tot, inv, cbar, ratio


def composite_full(sigma, color, delta, t=None) -> RenderOutput:
    """Multi-class compositing of all layers into one radiance render.

    sigma: (..., N, M) activated densities, color: (..., N, M, 3).
    Returns the composited color, the per-class soft masks, the expected
    termination depth, and the accumulated opacity.
    """
    sigma = np.asarray(sigma)
    color = np.asarray(color)
    delta = np.asarray(delta)
    t = _default_t(delta) if t is None else np.asarray(t)
    sigma_tot, _, cbar, ratio = _merge_classes(sigma, color)
    _, _, w = _weights(sigma_tot, delta)
    out_color = (w[..., None] * cbar).sum(axis=-2)
    sem = _sum_samples(w[..., None] * ratio)
    depth = (w * t).sum(axis=-1)
    acc = w.sum(axis=-1)
    return RenderOutput(out_color, sem, depth, acc)


def composite_semantic(sigma, delta) -> np.ndarray:
    """Per-class soft masks S (..., M) without touching colors."""
    sigma = np.asarray(sigma)
    delta = np.asarray(delta)
    sigma_tot, _, _, ratio = _merge_classes(sigma)
    _, _, w = _weights(sigma_tot, delta)
    return _sum_samples(w[..., None] * ratio)


def composite_layer(sigma, color, delta, index: int, t=None) -> RenderOutput:
    """Render layer ``index`` alone: other layers' densities set to zero."""
    sigma = np.asarray(sigma)
    m = sigma.shape[-1]
    if not (0 <= index < m):
        raise ValueError(f"class index {index} out of range for {m} classes")
    color = np.asarray(color)
    return composite_nerf(sigma[..., index], color[..., index, :], delta, t=t)


def composite_snerf_layer(sigma, color, p, index: int, delta, t=None) -> RenderOutput:
    """Baseline layer extraction: density reweighted by class probability.

    sigma: (..., N) shared density, color: (..., N, 3), p: (..., N, M).
    """
    p = np.asarray(p)
    m = p.shape[-1]
    if not (0 <= index < m):
        raise ValueError(f"class index {index} out of range for {m} classes")
    sigma = np.asarray(sigma)
    return composite_nerf(p[..., index] * sigma, color, delta, t=t)


def composite_backward(
    sigma,
    color,
    delta,
    t=None,
    grad_color=None,
    grad_sem=None,
    grad_depth=None,
    grad_acc=None,
):
    """Exact adjoint of composite_full's (color, sem, depth, acc) outputs.

    Upstream gradients may be None (treated as zero). Returns
    (grad_sigma (..., N, M), grad_c (..., N, M, 3)).
    """
    sigma = np.asarray(sigma)
    color = np.asarray(color)
    delta = np.asarray(delta)
    t = _default_t(delta) if t is None else np.asarray(t)
    sigma_tot, inv, cbar, ratio = _merge_classes(sigma, color)
    trans, alpha, w = _weights(sigma_tot, delta)
    trans_next = trans * (1.0 - alpha)

    # Per-sample payload contraction U[j] = <upstream, payload[j]>.
    u = np.zeros_like(delta)
    if grad_color is not None:
        gc = np.asarray(grad_color)
        u = u + np.einsum("...c,...nc->...n", gc, cbar)
    if grad_sem is not None:
        gs = np.asarray(grad_sem)
        u = u + np.einsum("...m,...nm->...n", gs, ratio)
    if grad_depth is not None:
        u = u + np.asarray(grad_depth)[..., None] * t
    if grad_acc is not None:
        u = u + np.asarray(grad_acc)[..., None]

    # d/da[j] of sum_k w_k U_k: own-segment term minus everything behind it.
    wu = w * u
    suffix = np.zeros_like(wu)
    suffix[..., :-1] = np.cumsum(wu[..., ::-1], axis=-1)[..., ::-1][..., 1:]
    grad_a = trans_next * u - suffix

    grad_sigma = delta[..., None] * grad_a[..., None]
    grad_sigma = np.broadcast_to(grad_sigma, sigma.shape).copy()
    grad_c = np.zeros(color.shape, dtype=np.result_type(sigma, color))

    # Within-sample quotient terms of cbar and the mask ratio.
    if grad_color is not None:
        gc = np.asarray(grad_color)
        resid = color - cbar[..., None, :]
        grad_sigma += (w * inv)[..., None] * np.einsum("...c,...nmc->...nm", gc, resid)
        grad_c += (w[..., None] * ratio)[..., None] * gc[..., None, None, :]
    if grad_sem is not None:
        gs = np.asarray(grad_sem)
        mix = np.einsum("...m,...nm->...n", gs, ratio)
        grad_sigma += (w * inv)[..., None] * (gs[..., None, :] - mix[..., None])
    return grad_sigma, grad_c
