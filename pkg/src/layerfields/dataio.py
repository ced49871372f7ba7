"""Dataset files: PNG codecs, camera lists, manifests with content hashes,
and dataset loading.

Images are stored as 8-bit sRGB PNGs (linear float values pass through the
sRGB transfer function on write and its inverse on load); soft masks are
16-bit grayscale PNGs holding linear values scaled by 65535.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .field import ClassSet
from .geometry import Camera

MANIFEST_VERSION = 1


class DatasetError(Exception):
    """Raised when a dataset directory is missing files or fails checks."""


def srgb_encode(linear):
    linear = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(linear, 1.0 / 2.4) - 0.055,
    )


def srgb_decode(encoded):
    encoded = np.asarray(encoded, dtype=np.float64)
    return np.where(
        encoded <= 0.04045,
        encoded / 12.92,
        np.power((encoded + 0.055) / 1.055, 2.4),
    )


def quantize_rgb8(img) -> np.ndarray:
    """Linear floats (H, W, 3) -> the uint8 sRGB values a PNG will hold."""
    return np.round(srgb_encode(img) * 255.0).astype(np.uint8)


def save_png_rgb8(path, img):
    """Write a linear-float (H, W, 3) image as an 8-bit sRGB PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize_rgb8(img), mode="RGB").save(path, format="PNG")


def load_png_rgb8(path) -> np.ndarray:
    """Read an 8-bit RGB PNG back to linear floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return srgb_decode(arr.astype(np.float64) / 255.0)


def quantize_gray16(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img), 0.0, 1.0) * 65535.0).astype(np.uint16)


def save_png_gray16(path, img):
    """Write floats in [0, 1] (H, W) as a 16-bit grayscale PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize_gray16(img), mode="I;16").save(path, format="PNG")


def load_png_gray16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint16)
    return arr.astype(np.float64) / 65535.0


def save_cameras(path, cameras: list[Camera]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in cameras], fh, indent=1, sort_keys=True)


def load_cameras(path) -> list[Camera]:
    with open(path, encoding="utf-8") as fh:
        return [Camera.from_dict(d) for d in json.load(fh)]


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _view_name(index: int) -> str:
    return f"{index:04d}"


def write_dataset(out_dir, spec, cameras, images, masks, splits) -> dict:
    """Write the full dataset layout and its manifest. Returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    class_names = list(spec.class_names)
    files: list[dict] = []

    def record(rel, role, view=None, split=None):
        entry = {"path": rel, "sha256": sha256_file(out / rel), "role": role}
        if view is not None:
            entry["view"] = view
            entry["split"] = split
        files.append(entry)

    with open(out / "scene.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=1, sort_keys=True)
    record("scene.json", "scene")
    save_cameras(out / "cameras.json", cameras)
    record("cameras.json", "cameras")
    for vi in range(len(cameras)):
        rel = f"rgb/{_view_name(vi)}.png"
        save_png_rgb8(out / rel, images[vi])
        record(rel, "rgb", vi, splits[vi])
        for ci, cname in enumerate(class_names):
            rel = f"mask/{cname}/{_view_name(vi)}.png"
            save_png_gray16(out / rel, masks[vi][..., ci])
            record(rel, "mask", vi, splits[vi])
    manifest = {
        "format_version": MANIFEST_VERSION,
        "classes": class_names,
        "background_index": spec.background_index,
        "seed": getattr(spec, "seed", None),
        "views": len(cameras),
        "splits": list(splits),
        "scene": spec.to_dict(),
        "files": files,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


@dataclass
class Dataset:
    """In-memory dataset: per-view images, soft masks, cameras, splits."""

    images: np.ndarray  # (V, H, W, 3) linear floats
    masks: np.ndarray  # (V, H, W, M)
    cameras: list[Camera]
    class_set: ClassSet
    splits: list[str]
    scene: dict

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def view_indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(self.n_views))
        return [i for i, s in enumerate(self.splits) if s == split]


def load_dataset(path, verify_hashes: bool = True) -> Dataset:
    """Load a dataset directory back into memory, verifying the manifest."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(
            f"unknown dataset format version: {manifest.get('format_version')!r}"
        )
    for entry in manifest["files"]:
        fpath = root / entry["path"]
        if not fpath.exists():
            raise DatasetError(f"missing dataset file: {fpath}")
        if verify_hashes and sha256_file(fpath) != entry["sha256"]:
            raise DatasetError(f"content hash mismatch: {fpath}")
    class_names = manifest["classes"]
    class_set = ClassSet(tuple(class_names), int(manifest["background_index"]))
    cameras = load_cameras(root / "cameras.json")
    n_views = manifest["views"]
    splits = list(manifest["splits"])
    images = []
    masks = []
    for vi in range(n_views):
        images.append(load_png_rgb8(root / f"rgb/{_view_name(vi)}.png"))
        per_class = []
        for cname in class_names:
            mpath = root / f"mask/{cname}/{_view_name(vi)}.png"
            if not mpath.exists():
                raise DatasetError(f"missing mask for class {cname!r}: {mpath}")
            per_class.append(load_png_gray16(mpath))
        masks.append(np.stack(per_class, axis=-1))
    return Dataset(
        images=np.stack(images),
        masks=np.stack(masks),
        cameras=cameras,
        class_set=class_set,
        splits=splits,
        scene=manifest.get("scene", {}),
    )
