"""PSNR and mean-IoU evaluation over held-out views."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def psnr(pred, gt, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / MSE) over all pixels and channels.

    Returns inf when the images match exactly (reported as "exact" in
    serialized reports).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def format_psnr(value: float) -> str | float:
    return "exact" if np.isinf(value) else float(value)


def miou(pred_masks, gt_masks, threshold: float = 0.5):
    """Per-class IoU and its mean after hardening both mask stacks.

    Masks are (..., M); hardening is ``mask >= threshold``. Classes absent
    from both prediction and ground truth (empty union) are excluded from
    the mean and reported as None. Returns (per_class, mean); mean is None
    when every class is absent.
    """
    pred_masks = np.asarray(pred_masks)
    gt_masks = np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ValueError(f"shape mismatch: {pred_masks.shape} vs {gt_masks.shape}")
    m = pred_masks.shape[-1]
    pred_hard = pred_masks >= threshold
    gt_hard = gt_masks >= threshold
    flat_p = pred_hard.reshape(-1, m)
    flat_g = gt_hard.reshape(-1, m)
    per_class: list[float | None] = []
    for i in range(m):
        inter = np.count_nonzero(flat_p[:, i] & flat_g[:, i])
        union = np.count_nonzero(flat_p[:, i] | flat_g[:, i])
        per_class.append(inter / union if union > 0 else None)
    present = [v for v in per_class if v is not None]
    mean = float(np.mean(present)) if present else None
    return per_class, mean


@dataclass
class EvalReport:
    """Held-out reconstruction and segmentation quality of a checkpoint."""

    per_view_psnr: list[float]
    mean_psnr: float
    per_class_iou: list[float | None]
    miou: float | None
    view_count: int
    split: str
    class_names: list[str]
    background_included: bool = True

    def to_dict(self) -> dict:
        return {
            "per_view_psnr": [format_psnr(v) for v in self.per_view_psnr],
            "mean_psnr": format_psnr(self.mean_psnr),
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "view_count": self.view_count,
            "split": self.split,
            "classes": self.class_names,
            "background_included": self.background_included,
        }

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def evaluate_field(field, dataset, split: str = "val", n_samples: int = 128) -> EvalReport:
    """Render the split's views and score them against the dataset."""
    from .render import render_view

    indices = dataset.view_indices(split)
    if not indices:
        raise ValueError(f"dataset has no views in split {split!r}")
    psnrs = []
    pred_stack = []
    gt_stack = []
    for vi in indices:
        out = render_view(field, dataset.cameras[vi], n_samples=n_samples)
        psnrs.append(psnr(out.color, dataset.images[vi]))
        pred_stack.append(out.sem_mask)
        gt_stack.append(dataset.masks[vi])
    per_class, mean_iou = miou(np.stack(pred_stack), np.stack(gt_stack))
    finite = [p for p in psnrs if np.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if finite else float("inf")
    return EvalReport(
        per_view_psnr=psnrs,
        mean_psnr=mean_psnr,
        per_class_iou=per_class,
        miou=mean_iou,
        view_count=len(indices),
        split=split,
        class_names=list(dataset.class_set.names),
    )
