"""layerfields: voxel radiance fields decomposed into soft semantic
layers, with training, rendering, editing, and evaluation."""

from .compositing import (
    ClassRadianceSample,
    RenderOutput,
    SnerfSample,
    composite_backward,
    composite_full,
    composite_layer,
    composite_nerf,
    composite_semantic,
    composite_snerf_layer,
    transmittance,
)
from .field import ClassSet, SnerfVoxelField, VoxelField, load_checkpoint
from .geometry import Camera, Ray, SamplePoint, generate_ray, stratified_samples
from .losses import (
    LossConfig,
    LossReport,
    RecallStats,
    color_loss,
    group_sparsity_loss,
    instantaneous_recall,
    semantic_loss,
    sparsity_loss,
    total_loss,
)
from .metrics import EvalReport, evaluate_field, miou, psnr
from .render import render_layer_view, render_rays, render_view
from .scenegen import (
    AnalyticField,
    SceneSpec,
    build_scene,
    emit_dataset,
    quadrature_render,
    two_blob_scene,
)
from .trainer import AdamState, TrainConfig, Trainer, adam_update, sample_batch
from .editing import ClassEdit, EditSpec, dolly_zoom_path, render_edited

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AnalyticField",
    "Camera",
    "ClassEdit",
    "ClassRadianceSample",
    "ClassSet",
    "EditSpec",
    "EvalReport",
    "LossConfig",
    "LossReport",
    "Ray",
    "RecallStats",
    "RenderOutput",
    "SamplePoint",
    "SceneSpec",
    "SnerfSample",
    "SnerfVoxelField",
    "TrainConfig",
    "Trainer",
    "VoxelField",
    "adam_update",
    "build_scene",
    "color_loss",
    "composite_backward",
    "composite_full",
    "composite_layer",
    "composite_nerf",
    "composite_semantic",
    "composite_snerf_layer",
    "dolly_zoom_path",
    "emit_dataset",
    "evaluate_field",
    "generate_ray",
    "group_sparsity_loss",
    "instantaneous_recall",
    "load_checkpoint",
    "miou",
    "psnr",
    "quadrature_render",
    "render_edited",
    "render_layer_view",
    "render_rays",
    "render_view",
    "sample_batch",
    "semantic_loss",
    "sparsity_loss",
    "stratified_samples",
    "total_loss",
    "transmittance",
    "two_blob_scene",
]
