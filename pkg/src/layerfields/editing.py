"""Edits on trained fields: per-class recoloring, rigid transforms and
removal, and parametric camera paths (dolly zoom).

Transformed classes are sampled at the original ray stations: each edited
class contributes the field values found at the inverse-transformed
position, while untouched classes (background included) keep their
original samples. Regions the transform reveals that were never observed
during training stay unconstrained by design.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import compositing
from .compositing import RenderOutput
from .field import ClassSet, VoxelField
from .geometry import Camera, camera_rays, sample_segments


@dataclass
class ClassEdit:
    """Edit applied to one semantic class."""

    color_matrix: np.ndarray | None = None  # (3, 3) acting on activated RGB
    color_offset: np.ndarray | None = None  # (3,)
    rotation: np.ndarray | None = None  # (3, 3) orthonormal, local->world
    translation: np.ndarray | None = None  # (3,)
    remove: bool = False

    def __post_init__(self):
        if self.rotation is not None:
            rot = np.asarray(self.rotation, dtype=np.float64)
            if rot.shape != (3, 3) or not np.allclose(
                rot @ rot.T, np.eye(3), atol=1e-6
            ):
                raise ValueError("edit rotation must be a 3x3 orthonormal matrix")
            self.rotation = rot
        if self.color_matrix is not None:
            self.color_matrix = np.asarray(self.color_matrix, dtype=np.float64)
            if self.color_matrix.shape != (3, 3):
                raise ValueError("color_matrix must be 3x3")
        if self.color_offset is not None:
            self.color_offset = np.asarray(self.color_offset, dtype=np.float64)
            if self.color_offset.shape != (3,):
                raise ValueError("color_offset must be a 3-vector")
        if self.translation is not None:
            self.translation = np.asarray(self.translation, dtype=np.float64)
            if self.translation.shape != (3,):
                raise ValueError("translation must be a 3-vector")

    @property
    def has_rigid(self) -> bool:
        return self.rotation is not None or self.translation is not None

    @property
    def has_color(self) -> bool:
        return self.color_matrix is not None or self.color_offset is not None


@dataclass
class EditSpec:
    """Per-class edits, keyed by class index after resolution."""

    per_class: dict[int, ClassEdit] = dc_field(default_factory=dict)

    def resolve(self, class_set: ClassSet):
        for idx in self.per_class:
            if not (0 <= idx < class_set.m):
                raise ValueError(f"edit references class index {idx} out of range")
        return self

    @classmethod
    def from_dict(cls, d: dict, class_set: ClassSet) -> "EditSpec":
        """Parse the JSON edit format: a mapping from class name to edit."""
        per_class = {}
        for name, entry in d.items():
            idx = class_set.index_of(name)
            per_class[idx] = ClassEdit(
                color_matrix=entry.get("color_matrix"),
                color_offset=entry.get("color_offset"),
                rotation=entry.get("rotation"),
                translation=entry.get("translation"),
                remove=bool(entry.get("remove", False)),
            )
        return cls(per_class).resolve(class_set)

    @classmethod
    def load(cls, path, class_set: ClassSet) -> "EditSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), class_set)

    def merged_with(self, other: "EditSpec") -> "EditSpec":
        """Union of removals (used to compose remove edits)."""
        merged = dict(self.per_class)
        for idx, edit in other.per_class.items():
            if idx in merged:
                merged[idx] = ClassEdit(
                    color_matrix=edit.color_matrix
                    if edit.color_matrix is not None
                    else merged[idx].color_matrix,
                    color_offset=edit.color_offset
                    if edit.color_offset is not None
                    else merged[idx].color_offset,
                    rotation=edit.rotation
                    if edit.rotation is not None
                    else merged[idx].rotation,
                    translation=edit.translation
                    if edit.translation is not None
                    else merged[idx].translation,
                    remove=edit.remove or merged[idx].remove,
                )
            else:
                merged[idx] = edit
        return EditSpec(merged)


def _edited_samples(field: VoxelField, pts, edit: EditSpec):
    """Per-class densities/colors at pts with the edit applied."""
    sigma, color = field.query(pts)
    for idx, ce in edit.per_class.items():
        if ce.remove:
            sigma[..., idx] = 0.0
            continue
        if ce.has_rigid:
            rot = ce.rotation if ce.rotation is not None else np.eye(3)
            trans = ce.translation if ce.translation is not None else np.zeros(3)
            # content at x comes from the inverse-transformed position
            src = (pts - trans) @ rot  # == rot.T applied from the left
            s_i, c_i = field.query(src)
            sigma[..., idx] = s_i[..., idx]
            color[..., idx, :] = c_i[..., idx, :]
        if ce.has_color:
            mat = ce.color_matrix if ce.color_matrix is not None else np.eye(3)
            off = ce.color_offset if ce.color_offset is not None else np.zeros(3)
            color[..., idx, :] = np.clip(color[..., idx, :] @ mat.T + off, 0.0, 1.0)
    return sigma, color


def render_edited(
    field: VoxelField,
    camera: Camera,
    edit: EditSpec,
    n_samples: int = 128,
    chunk: int = 8192,
) -> RenderOutput:
    """Render a view of the edited field; arrays shaped (H, W, ...)."""
    edit.resolve(field.class_set)
    origins, dirs = camera_rays(camera)
    h, w = camera.height, camera.width
    m = field.class_set.m
    color = np.zeros((h * w, 3))
    sem = np.zeros((h * w, m))
    depth = np.zeros(h * w)
    acc = np.zeros(h * w)
    for start in range(0, h * w, chunk):
        sl = slice(start, min(start + chunk, h * w))
        nb = sl.stop - sl.start
        t, delta = sample_segments(camera.t_near, camera.t_far, n_samples, count=nb)
        pts = origins[sl][:, None, :] + t[..., None] * dirs[sl][:, None, :]
        sigma, col = _edited_samples(field, pts, edit)
        out = compositing.composite_full(sigma, col, delta, t=t)
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


def dolly_zoom_path(
    start: Camera,
    target_distance: float,
    frames: int,
    travel: float | None = None,
) -> list[Camera]:
    """Advance toward the subject plane while shrinking focal length so the
    subject-plane field of view stays fixed (f_k / d_k constant).

    ``target_distance`` is the distance from the start camera to the subject
    plane along the view axis; ``travel`` (default: 60% of the way in) is
    how far the last frame has advanced. The camera must stay strictly in
    front of the subject plane.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if target_distance <= 0:
        raise ValueError("subject plane must be in front of the camera")
    if travel is None:
        travel = 0.6 * target_distance
    if travel >= target_distance:
        raise ValueError("camera would reach or pass the subject plane")
    forward = -start.rotation[:, 2]  # camera looks down its local -z
    cams = []
    for k in range(frames):
        advance = travel * (k / (frames - 1)) if frames > 1 else 0.0
        d_k = target_distance - advance
        scale = d_k / target_distance
        pose = start.cam_to_world.copy()
        pose[:3, 3] = start.position + advance * forward
        cams.append(
            Camera(
                width=start.width,
                height=start.height,
                fx=start.fx * scale,
                fy=start.fy * scale,
                cx=start.cx,
                cy=start.cy,
                cam_to_world=pose,
                t_near=start.t_near,
                t_far=start.t_far,
            )
        )
    return cams


def frustum_width_at(camera: Camera, distance: float) -> float:
    """Width of the camera frustum at the given forward distance."""
    return camera.width * distance / camera.fx


def save_frames(out_dir, outputs: list[RenderOutput]):
    """Write numbered PNG frames for a rendered camera path."""
    from .dataio import save_png_rgb8

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, ro in enumerate(outputs):
        save_png_rgb8(out / f"frame_{k:04d}.png", ro.color)
