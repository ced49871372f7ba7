"""Training loop: batch assembly, fused forward/backward through the field
and compositing, Adam updates, checkpointing, and JSON-lines logging.

Two modes:
  * "ssd": the layered model; per-class densities and colors trained with
    the color, recall-weighted semantic, sparsity, and group-sparsity
    losses.
  * "snerf": the baseline; one shared density plus color, with per-class
    logits composited like extra radiance channels and trained by softmax
    cross-entropy against hard (argmax) labels. The opacity regularizers
    are inactive here, and lambda_sem weights the cross-entropy. The
    sparsity/group report fields log 0 when their weights are 0 (the
    unweighted values are not computed).

All randomness flows through one seeded generator; kernels accumulate in a
fixed order, so runs with the same seed are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import _kernels
from .dataio import Dataset
from .field import SnerfVoxelField, VoxelField, ClassSet
from .geometry import generate_rays, sample_segments
from .losses import (
    LossConfig,
    LossReport,
    color_loss,
    instantaneous_recall,
    semantic_loss,
    total_loss,
)


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss or gradients."""


@dataclass
class TrainConfig:
    rays_per_batch: int = 2048
    iterations: int = 5000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0
    deterministic: bool = True
    n_samples: int = 128
    grid_resolution: tuple = (64, 64, 64)
    mode: str = "ssd"
    init_density: float = 0.01
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    upsample_at: tuple = ()  # steps at which the grid resolution doubles
    loss: LossConfig = dc_field(default_factory=LossConfig)

    def __post_init__(self):
        if self.rays_per_batch < 1 or self.iterations < 0 or self.n_samples < 1:
            raise ValueError("counts must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.mode not in ("ssd", "snerf"):
            raise ValueError("mode must be 'ssd' or 'snerf'")
        self.upsample_at = tuple(sorted(int(s) for s in self.upsample_at))
        if len(set(self.upsample_at)) != len(self.upsample_at):
            raise ValueError("upsample steps must be distinct")

    def resolution_at(self, step: int):
        """Grid resolution in effect at a training step.

        grid_resolution is the final resolution; each pending upsample
        milestone halves it (coarse-to-fine)."""
        pending = sum(1 for s in self.upsample_at if step < s)
        return tuple(max(2, r >> pending) for r in self.grid_resolution)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_resolution"] = list(self.grid_resolution)
        d["upsample_at"] = list(self.upsample_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        if "grid_resolution" in d:
            d["grid_resolution"] = tuple(d["grid_resolution"])
        if "upsample_at" in d:
            d["upsample_at"] = tuple(d["upsample_at"])
        return cls(**d)


@dataclass
class AdamState:
    """First/second moments per parameter array plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-15,
) -> AdamState:
    """One bias-corrected Adam step, in place on ``param``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError("parameter, gradient, and moment shapes must match")
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged("non-finite gradients passed to adam_update")
    state.step += 1
    _kernels.adam_step(
        param.reshape(-1),
        np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1),
        state.m.reshape(-1),
        state.v.reshape(-1),
        state.step,
        lr,
        beta1,
        beta2,
        eps,
    )
    return state


@dataclass
class RayBatch:
    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3)
    t_near: float
    t_far: float
    gt_color: np.ndarray  # (B, 3)
    gt_mask: np.ndarray  # (B, M)
    view_index: int


def sample_batch(dataset: Dataset, rays_per_batch: int, rng: np.random.Generator) -> RayBatch:
    """Pick one training image uniformly, then pixels with replacement."""
    train = dataset.view_indices("train")
    if not train:
        raise ValueError("dataset has no training views")
    vi = train[int(rng.integers(len(train)))]
    cam = dataset.cameras[vi]
    ix = rng.integers(0, cam.width, size=rays_per_batch)
    iy = rng.integers(0, cam.height, size=rays_per_batch)
    px = np.stack([ix + 0.5, iy + 0.5], axis=-1)
    origins, dirs = generate_rays(cam, px)
    return RayBatch(
        origins=origins,
        dirs=dirs,
        t_near=cam.t_near,
        t_far=cam.t_far,
        gt_color=dataset.images[vi][iy, ix],
        gt_mask=dataset.masks[vi][iy, ix],
        view_index=vi,
    )


def _scene_bounds(dataset: Dataset):
    scene = dataset.scene or {}
    if "scene_bounds" not in scene:
        raise ValueError("dataset scene record carries no scene_bounds")
    lo, hi = scene["scene_bounds"]
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


class Trainer:
    """Owns the field, optimizer state, rng, and scratch buffers."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, field: VoxelField | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        bounds = _scene_bounds(dataset)
        cs = dataset.class_set
        if field is not None:
            self.field = field
        elif cfg.mode == "snerf":
            self.field = SnerfVoxelField.create(
                cfg.resolution_at(0), bounds, cs, cfg.init_density
            )
        else:
            self.field = VoxelField.create(
                cfg.resolution_at(0), bounds, cs, cfg.init_density
            )
        self.dtype = self.field.raw_density.dtype
        self.step_count = 0
        self.adam = {
            name: AdamState(np.zeros_like(arr), np.zeros_like(arr))
            for name, arr in self._params().items()
        }
        b, n, m = cfg.rays_per_batch, cfg.n_samples, self.field.m
        dt = self.dtype
        self._buf = {
            "sigma": np.empty((b, n, m), dt),
            "dderiv": np.empty((b, n, m), dt),
            "color": np.empty((b, n, m, 3), dt),
            "cderiv": np.empty((b, n, m, 3), dt),
            "weight": np.empty((b, n), dt),
            "trans_next": np.empty((b, n), dt),
            "cbar": np.empty((b, n, 3), dt),
            "out_color": np.empty((b, 3), dt),
            "out_sem": np.empty((b, m), dt),
            "out_depth": np.empty(b, dt),
            "out_acc": np.empty(b, dt),
            "gsig_raw": np.empty((b, n, m), dt),
            "gcol_raw": np.empty((b, n, m, 3), dt),
            "sparse_ray": np.empty(b, dt),
            "group_ray": np.empty(b, dt),
            "u_zero": np.zeros((b, n), dt),
        }
        self._grad = {name: np.zeros_like(arr) for name, arr in self._params().items()}

    def _params(self) -> dict[str, np.ndarray]:
        p = {"density": self.field.raw_density, "color": self.field.raw_color}
        if isinstance(self.field, SnerfVoxelField):
            p["logit"] = self.field.raw_logit
        return p

    def _node_positions(self, resolution):
        nx, ny, nz = resolution
        axes = [
            np.linspace(self.field.lo[k], self.field.hi[k], n)
            for k, n in enumerate((nx, ny, nz))
        ]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.ascontiguousarray(
            np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
        )

    def _upsample_field(self):
        """Double the grid resolution coarse-to-fine: the finer grid starts
        as the trilinear interpolation of the current one; optimizer
        moments reset."""
        old = self.field
        new_res = self.cfg.resolution_at(self.step_count)
        if new_res == old.resolution:
            return
        pts = self._node_positions(new_res)
        raw_d, raw_c = old.query_raw(pts)
        cls = (
            SnerfVoxelField if isinstance(old, SnerfVoxelField) else VoxelField
        )
        new = cls(new_res, (old.lo, old.hi), old.class_set, dtype=self.dtype)
        nx, ny, nz = new_res
        new.raw_density[:] = raw_d.reshape(nz, ny, nx, old.m)
        new.raw_color[:] = raw_c.reshape(nz, ny, nx, old.m, 3)
        if isinstance(old, SnerfVoxelField):
            logits = old.query_logits(pts)
            new.raw_logit[:] = logits.reshape(nz, ny, nx, old.class_set.m)
        self.field = new
        self.adam = {
            name: AdamState(np.zeros_like(arr), np.zeros_like(arr))
            for name, arr in self._params().items()
        }
        self._grad = {name: np.zeros_like(arr) for name, arr in self._params().items()}

    def train_step(self) -> LossReport:
        if self.step_count in self.cfg.upsample_at:
            self._upsample_field()
        batch = sample_batch(self.dataset, self.cfg.rays_per_batch, self.rng)
        t, delta = sample_segments(
            batch.t_near,
            batch.t_far,
            self.cfg.n_samples,
            rng=self.rng,
            count=self.cfg.rays_per_batch,
            dtype=self.dtype,
        )
        origins = np.ascontiguousarray(batch.origins, dtype=self.dtype)
        dirs = np.ascontiguousarray(batch.dirs, dtype=self.dtype)
        buf = self._buf
        f = self.field
        _kernels.fused_forward(
            f.raw_density,
            f.raw_color,
            f.lo,
            f.hi,
            origins,
            dirs,
            t,
            delta,
            buf["sigma"],
            buf["dderiv"],
            buf["color"],
            buf["cderiv"],
            buf["weight"],
            buf["trans_next"],
            buf["cbar"],
            buf["out_color"],
            buf["out_sem"],
            buf["out_depth"],
            buf["out_acc"],
        )
        cfg = self.cfg
        c_loss, g_color = color_loss(buf["out_color"], batch.gt_color)
        mse = c_loss / batch.gt_color.size
        psnr_batch = float("inf") if mse == 0 else float(10.0 * np.log10(1.0 / mse))

        pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
        pts = np.ascontiguousarray(pts)
        if cfg.mode == "snerf":
            report = self._snerf_losses_and_grads(batch, t, delta, pts, c_loss, g_color)
        else:
            report = self._ssd_losses_and_grads(batch, delta, c_loss, g_color)
        report.step = self.step_count
        report.psnr_batch = psnr_batch
        report.total, _ = total_loss(
            report.color, report.sem, report.sparse, report.group, cfg.loss
        )
        if not np.isfinite(report.total):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step_count}: {report}"
            )

        # scatter per-sample raw gradients into the parameter grids
        for g in self._grad.values():
            g[...] = 0
        m = self.field.m
        _kernels.scatter_density_color(
            self._grad["density"],
            self._grad["color"],
            pts,
            f.lo,
            f.hi,
            buf["gsig_raw"].reshape(-1, m),
            buf["gcol_raw"].reshape(-1, m, 3),
        )
        if cfg.mode == "snerf":
            _kernels.scatter_channels(
                self._grad["logit"], pts, f.lo, f.hi, self._glogit.reshape(-1, f.class_set.m)
            )
        for name, param in self._params().items():
            adam_update(
                param,
                self._grad[name],
                self.adam[name],
                cfg.learning_rate,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )
        self.step_count += 1
        return report

    def _ssd_losses_and_grads(self, batch, delta, c_loss, g_color) -> LossReport:
        cfg = self.cfg
        buf = self._buf
        recall = instantaneous_recall(buf["out_sem"], batch.gt_mask)
        s_loss, g_sem = semantic_loss(buf["out_sem"], batch.gt_mask, recall, cfg.loss)
        scale = cfg.loss.ray_scale(cfg.rays_per_batch)
        coef_sparse = cfg.loss.lambda_sparse * scale
        coef_group = cfg.loss.lambda_group * scale
        _kernels.fused_backward(
            buf["sigma"],
            buf["dderiv"],
            buf["color"],
            buf["cderiv"],
            buf["weight"],
            buf["trans_next"],
            buf["cbar"],
            delta,
            np.ascontiguousarray(g_color, dtype=self.dtype),
            np.ascontiguousarray(cfg.loss.lambda_sem * g_sem, dtype=self.dtype),
            buf["u_zero"],
            coef_sparse,
            coef_group,
            cfg.loss.gamma_sparse,
            cfg.loss.eps_pow,
            buf["gsig_raw"],
            buf["gcol_raw"],
            buf["sparse_ray"],
            buf["group_ray"],
        )
        sparse_val = float(buf["sparse_ray"].sum()) * scale if coef_sparse else 0.0
        group_val = float(buf["group_ray"].sum()) * scale if coef_group else 0.0
        return LossReport(0, 0.0, c_loss, s_loss, sparse_val, group_val, 0.0)

    def _snerf_losses_and_grads(self, batch, t, delta, pts, c_loss, g_color) -> LossReport:
        cfg = self.cfg
        buf = self._buf
        f: SnerfVoxelField = self.field
        msem = f.class_set.m
        logits = np.empty((pts.shape[0], msem), dtype=self.dtype)
        _kernels.interp_channels(f.raw_logit, pts, f.lo, f.hi, logits)
        logits = logits.reshape(cfg.rays_per_batch, cfg.n_samples, msem)
        w = buf["weight"]
        lg = np.einsum("bn,bnm->bm", w, logits)
        # stable log-softmax cross entropy against hard argmax labels
        labels = np.argmax(batch.gt_mask, axis=-1)
        zmax = lg.max(axis=-1, keepdims=True)
        logz = zmax[:, 0] + np.log(np.exp(lg - zmax).sum(axis=-1))
        ce = float((logz - lg[np.arange(lg.shape[0]), labels]).sum())
        p = np.exp(lg - logz[:, None])
        g_lg = p.copy()
        g_lg[np.arange(lg.shape[0]), labels] -= 1.0
        g_lg *= cfg.loss.lambda_sem
        u_extra = np.ascontiguousarray(
            np.einsum("bm,bnm->bn", g_lg, logits), dtype=self.dtype
        )
        _kernels.fused_backward(
            buf["sigma"],
            buf["dderiv"],
            buf["color"],
            buf["cderiv"],
            buf["weight"],
            buf["trans_next"],
            buf["cbar"],
            delta,
            np.ascontiguousarray(g_color, dtype=self.dtype),
            np.zeros((cfg.rays_per_batch, 1), dtype=self.dtype),
            u_extra,
            0.0,
            0.0,
            cfg.loss.gamma_sparse,
            cfg.loss.eps_pow,
            buf["gsig_raw"],
            buf["gcol_raw"],
            buf["sparse_ray"],
            buf["group_ray"],
        )
        self._glogit = np.ascontiguousarray(
            w[..., None] * g_lg[:, None, :], dtype=self.dtype
        )
        return LossReport(0, 0.0, c_loss, ce, 0.0, 0.0, 0.0)

    def run(self, out_dir=None, log_path=None, progress_every: int = 0):
        """Train for cfg.iterations steps; write logs and checkpoints."""
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "config.json", "w", encoding="utf-8") as fh:
                json.dump(self.cfg.to_dict(), fh, indent=1, sort_keys=True)
        log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for _ in range(self.cfg.iterations):
                report = self.train_step()
                if log_fh is not None:
                    log_fh.write(report.to_json_line() + "\n")
                if progress_every and report.step % progress_every == 0:
                    print(
                        f"step {report.step:6d} total {report.total:.5f} "
                        f"psnr {report.psnr_batch:.2f}",
                        flush=True,
                    )
                if (
                    out is not None
                    and self.cfg.checkpoint_every
                    and self.step_count % self.cfg.checkpoint_every == 0
                    and self.step_count < self.cfg.iterations
                ):
                    self.save_checkpoint(out / f"checkpoint_{self.step_count:06d}.ckpt")
            if out is not None:
                self.save_checkpoint(out / "checkpoint_final.ckpt")
        finally:
            if log_fh is not None:
                log_fh.close()
        return self.field

    def save_checkpoint(self, path):
        self.field.save(
            path,
            extra_header={"config": self.cfg.to_dict(), "step": self.step_count},
        )
