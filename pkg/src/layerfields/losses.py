"""Training losses: color, recall-weighted semantic, sparsity, and group
sparsity, with hand-derived gradients.

Color and semantic losses sum over the rays of a batch. The opacity
regularizers sum over rays, samples, and classes by default, keeping
their published weights calibrated against the summed color loss at the
default batch size; LossConfig.ray_reduction="mean" switches them to a
per-ray average. Gradients of |x|**gamma with gamma < 1 are clamped by
evaluating the derivative at max(|x|, eps_pow) to bound the x -> 0
singularity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np


@dataclass
class LossConfig:
    lambda_sem: float = 1e-1
    lambda_sparse: float = 1e-3
    lambda_group: float = 1e-3
    gamma_sem: float = 1.0
    gamma_sparse: float = 0.8
    eps_pow: float = 1e-4
    ray_reduction: str = "sum"  # reduction over rays for the regularizers

    def __post_init__(self):
        if min(self.lambda_sem, self.lambda_sparse, self.lambda_group) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0 < self.gamma_sparse <= 1):
            raise ValueError("gamma_sparse must lie in (0, 1]")
        if not (0 < self.gamma_sem <= 1):
            raise ValueError("gamma_sem must lie in (0, 1]")
        if self.ray_reduction not in ("mean", "sum"):
            raise ValueError("ray_reduction must be 'mean' or 'sum'")

    def ray_scale(self, n_rays: int) -> float:
        return 1.0 / n_rays if self.ray_reduction == "mean" else 1.0


@dataclass
class LossReport:
    """Unweighted loss terms for one training step."""

    step: int
    total: float
    color: float
    sem: float
    sparse: float
    group: float
    psnr_batch: float

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RecallStats:
    """Per-class instantaneous recall of a batch (treated as constants)."""

    tp: np.ndarray  # (M,) soft true-positive mass
    p: np.ndarray  # (M,) ground-truth positive counts
    recall: np.ndarray  # (M,) tp / p, 1 where p == 0


def color_loss(pred_color, gt_color):
    """Sum of squared color errors over the batch; gradient w.r.t. pred."""
    pred_color = np.asarray(pred_color)
    gt_color = np.asarray(gt_color)
    if pred_color.size == 0:
        raise ValueError("batch must be non-empty")
    diff = pred_color - gt_color
    return float((diff * diff).sum()), 2.0 * diff


def instantaneous_recall(pred_sem, gt_sem) -> RecallStats:
    """Per-class recall within a batch.

    A ray is a ground-truth positive of class i when i is the argmax of its
    ground-truth soft mask; the true-positive mass is the predicted soft
    score summed over those rays. Classes absent from the batch get
    recall 1 (they cannot be under-recalled).
    """
    pred_sem = np.asarray(pred_sem)
    gt_sem = np.asarray(gt_sem)
    if pred_sem.size == 0:
        raise ValueError("batch must be non-empty")
    m = gt_sem.shape[-1]
    labels = np.argmax(gt_sem, axis=-1)
    onehot = labels[..., None] == np.arange(m)
    p = onehot.sum(axis=0).astype(np.float64)
    tp = (pred_sem * onehot).sum(axis=0).astype(np.float64)
    recall = np.where(p > 0, tp / np.where(p > 0, p, 1.0), 1.0)
    return RecallStats(tp=tp, p=p, recall=recall)


def semantic_loss(pred_sem, gt_sem, recall: RecallStats, cfg: LossConfig):
    """Recall-weighted robust mask loss; gradient w.r.t. predicted masks."""
    pred_sem = np.asarray(pred_sem)
    gt_sem = np.asarray(gt_sem)
    weight = 1.0 - recall.recall
    diff = pred_sem - gt_sem
    gamma = cfg.gamma_sem
    if gamma == 1.0:
        value = float((weight * np.abs(diff)).sum())
        grad = weight * np.sign(diff)
    else:
        mag = np.abs(diff)
        value = float((weight * mag**gamma).sum())
        clamped = np.maximum(mag, cfg.eps_pow)
        grad = weight * gamma * clamped ** (gamma - 1.0) * np.sign(diff)
    return value, grad


def _alpha(sigma, delta):
    a = np.asarray(sigma) * np.asarray(delta)[..., None]
    return -np.expm1(-a), np.exp(-a)


def sparsity_loss(sigma, delta, cfg: LossConfig):
    """Pushes per-sample, per-class opacity toward 0 or 1.

    sigma: (B, N, M) activated densities, delta: (B, N). Returns the loss
    and its gradient w.r.t. sigma.
    """
    gamma = cfg.gamma_sparse
    if gamma >= 1.0:
        raise ValueError("sparsity loss requires gamma < 1")
    alpha, trans_seg = _alpha(sigma, delta)
    one_m = 1.0 - alpha
    scale = cfg.ray_scale(alpha.shape[0])
    value = float((alpha**gamma + one_m**gamma).sum()) * scale
    ac = np.maximum(alpha, cfg.eps_pow)
    bc = np.maximum(one_m, cfg.eps_pow)
    dalpha = gamma * (ac ** (gamma - 1.0) - bc ** (gamma - 1.0))
    grad = scale * dalpha * np.asarray(delta)[..., None] * trans_seg
    return value, grad


def group_sparsity_loss(sigma, delta, cfg: LossConfig):
    """Penalizes opacity co-occurrence across layers: sum of alpha**gamma."""
    gamma = cfg.gamma_sparse
    if gamma >= 1.0:
        raise ValueError("group sparsity loss requires gamma < 1")
    alpha, trans_seg = _alpha(sigma, delta)
    scale = cfg.ray_scale(alpha.shape[0])
    value = float((alpha**gamma).sum()) * scale
    ac = np.maximum(alpha, cfg.eps_pow)
    dalpha = gamma * ac ** (gamma - 1.0)
    grad = scale * dalpha * np.asarray(delta)[..., None] * trans_seg
    return value, grad


def total_loss(
    color: float,
    sem: float,
    sparse: float,
    group: float,
    cfg: LossConfig,
    step: int = 0,
    psnr_batch: float = float("nan"),
):
    """Weighted sum of the four terms plus a report of the raw values."""
    total = (
        color
        + cfg.lambda_sem * sem
        + cfg.lambda_sparse * sparse
        + cfg.lambda_group * group
    )
    report = LossReport(
        step=step,
        total=float(total),
        color=float(color),
        sem=float(sem),
        sparse=float(sparse),
        group=float(group),
        psnr_batch=float(psnr_batch),
    )
    return float(total), report
