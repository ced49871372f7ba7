"""Trainable scene representation: a dense voxel grid of per-class raw
density and color parameters, queried by trilinear interpolation.

Raw parameters are unconstrained; activations map them to physical values
(softplus for density, sigmoid for color) *after* interpolation. Queries
outside the grid bounds return vacuum (zero density, zero color).

Checkpoint format: one compact JSON header line (UTF-8, terminated by a
single newline) followed by raw parameters as little-endian IEEE-754 32-bit
floats in x-fastest voxel order, density blocks for classes 0..M-1 first,
then per-class color blocks (RGB interleaved per voxel). The baseline model
appends its logit blocks after the color blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels

CHECKPOINT_VERSION = 1


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inverse requires positive input")
    return y + np.log(-np.expm1(-y))


def expit(x):
    """Numerically stable logistic sigmoid."""
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ClassSet:
    """The M semantic classes of a scene, one of which is background."""

    names: tuple[str, ...]
    background_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise ValueError("need at least one class")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if not (0 <= self.background_index < len(self.names)):
            raise ValueError("background_index out of range")

    @property
    def m(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown class name: {name!r}") from None


def _check_points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    if not np.all(np.isfinite(pts)):
        raise ValueError("query positions must be finite")
    return pts, single


class VoxelField:
    """Dense voxel grid holding M raw density and M raw RGB color channels.

    ``resolution`` counts grid nodes per axis; node (0, 0, 0) sits at the
    low corner of ``bounds`` and the last node at the high corner.
    """

    model_kind = "ssd"

    def __init__(self, resolution, bounds, class_set: ClassSet, dtype=np.float32):
        nx, ny, nz = (int(v) for v in resolution)
        if min(nx, ny, nz) < 2:
            raise ValueError("resolution must be >= 2 nodes per axis")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo >= hi):
            raise ValueError("bounds must be a valid (lo, hi) box")
        self.resolution = (nx, ny, nz)
        self.lo = lo
        self.hi = hi
        self.class_set = class_set
        m = class_set.m
        self.raw_density = np.zeros((nz, ny, nx, m), dtype=dtype)
        self.raw_color = np.zeros((nz, ny, nx, m, 3), dtype=dtype)

    @classmethod
    def create(cls, resolution, bounds, class_set, init_density=0.01, dtype=np.float32):
        """Fresh field: uniform low-density fog, mid-gray colors."""
        f = cls(resolution, bounds, class_set, dtype=dtype)
        f.raw_density[:] = softplus_inverse(init_density)
        return f

    @property
    def m(self) -> int:
        """Number of density/color channels (1 for the baseline model)."""
        return self.raw_density.shape[3]

    @property
    def n_params(self) -> int:
        return self.raw_density.size + self.raw_color.size

    def _color_flat(self) -> np.ndarray:
        nz, ny, nx, m, _ = self.raw_color.shape
        return self.raw_color.reshape(nz, ny, nx, m * 3)

    def query_raw(self, x):
        """Interpolated raw (pre-activation) values at positions x.

        Returns (raw_density (..., M), raw_color (..., M, 3)); zeros
        outside the bounds.
        """
        pts, single = _check_points(x)
        m = self.m
        out_d = np.empty((pts.shape[0], m), dtype=self.raw_density.dtype)
        out_c = np.empty((pts.shape[0], m * 3), dtype=self.raw_color.dtype)
        _kernels.interp_channels(self.raw_density, pts, self.lo, self.hi, out_d)
        _kernels.interp_channels(self._color_flat(), pts, self.lo, self.hi, out_c)
        out_c = out_c.reshape(pts.shape[0], m, 3)
        if single:
            return out_d[0], out_c[0]
        shape = np.asarray(x).shape[:-1]
        return out_d.reshape(*shape, m), out_c.reshape(*shape, m, 3)

    def query(self, x, d=None):
        """Activated densities (..., M) and colors (..., M, 3) at x.

        The view direction ``d`` is accepted for interface compatibility
        but ignored: colors are diffuse. Out-of-bounds positions return
        zero density and zero color.
        """
        raw_d, raw_c = self.query_raw(x)
        pts, _ = _check_points(x)
        inside = self._inside(pts).reshape(raw_d.shape[:-1])
        sigma = np.where(inside[..., None], softplus(raw_d), 0.0)
        color = np.where(inside[..., None, None], expit(raw_c), 0.0)
        return sigma, color

    def _inside(self, pts) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def query_grad(self, x, grad_sigma, grad_color, out_density=None, out_color=None):
        """Exact adjoint of query: scatter chain-rule gradients to voxels.

        grad_sigma: (..., M) upstream on activated densities;
        grad_color: (..., M, 3) upstream on activated colors. Accumulates
        into (and returns) gradient arrays shaped like the raw parameters.
        """
        pts, _ = _check_points(x)
        m = self.m
        gs = np.asarray(grad_sigma).reshape(-1, m)
        gc = np.asarray(grad_color).reshape(-1, m, 3)
        if gs.shape[0] != pts.shape[0] or gc.shape[0] != pts.shape[0]:
            raise ValueError("upstream gradient batch does not match positions")
        raw_d, raw_c = self.query_raw(pts)
        up_d = np.ascontiguousarray(gs * expit(raw_d), dtype=self.raw_density.dtype)
        s = expit(raw_c)
        up_c = np.ascontiguousarray(
            (gc * s * (1.0 - s)).reshape(-1, m * 3), dtype=self.raw_color.dtype
        )
        if out_density is None:
            out_density = np.zeros_like(self.raw_density)
        if out_color is None:
            out_color = np.zeros_like(self.raw_color)
        nz, ny, nx = out_density.shape[:3]
        _kernels.scatter_channels(out_density, pts, self.lo, self.hi, up_d)
        _kernels.scatter_channels(
            out_color.reshape(nz, ny, nx, m * 3), pts, self.lo, self.hi, up_c
        )
        return out_density, out_color

    def header(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model": self.model_kind,
            "resolution": list(self.resolution),
            "bounds": [self.lo.tolist(), self.hi.tolist()],
            "classes": list(self.class_set.names),
            "background_index": self.class_set.background_index,
            "activations": {"density": "softplus", "color": "sigmoid"},
        }

    def _payload_blocks(self):
        for i in range(self.m):
            yield self.raw_density[..., i]
        for i in range(self.m):
            yield self.raw_color[..., i, :]

    def save(self, path, extra_header: dict | None = None):
        save_checkpoint(self, path, extra_header)

    def load_payload(self, blob: memoryview):
        self.raw_density, self.raw_color, _ = _read_blocks(
            blob, self.resolution, self.m, with_logits=False
        )


class SnerfVoxelField(VoxelField):
    """Baseline grid: one shared density, one color, M raw logit channels.

    Logits are interpolated without activation; class probabilities come
    from a softmax wherever the caller needs them.
    """

    model_kind = "snerf"

    def __init__(self, resolution, bounds, class_set, dtype=np.float32):
        super().__init__(resolution, bounds, ClassSet(("all",)), dtype=dtype)
        nz, ny, nx = self.raw_density.shape[:3]
        self.class_set = class_set
        self.raw_logit = np.zeros((nz, ny, nx, class_set.m), dtype=dtype)

    @property
    def n_params(self) -> int:
        return self.raw_density.size + self.raw_color.size + self.raw_logit.size

    def query_logits(self, x):
        pts, single = _check_points(x)
        out = np.empty((pts.shape[0], self.class_set.m), dtype=self.raw_logit.dtype)
        _kernels.interp_channels(self.raw_logit, pts, self.lo, self.hi, out)
        if single:
            return out[0]
        shape = np.asarray(x).shape[:-1]
        return out.reshape(*shape, self.class_set.m)

    def header(self) -> dict:
        h = super().header()
        h["classes"] = list(self.class_set.names)
        h["background_index"] = self.class_set.background_index
        h["activations"]["logit"] = "identity"
        return h

    def _payload_blocks(self):
        yield self.raw_density[..., 0]
        yield self.raw_color[..., 0, :]
        for i in range(self.class_set.m):
            yield self.raw_logit[..., i]

    def load_payload(self, blob: memoryview):
        self.raw_density, self.raw_color, self.raw_logit = _read_blocks(
            blob, self.resolution, self.class_set.m, with_logits=True
        )


def save_checkpoint(field: VoxelField, path, extra_header: dict | None = None):
    header = field.header()
    if extra_header:
        header.update(extra_header)
    payload = bytearray()
    for block in field._payload_blocks():
        payload += np.ascontiguousarray(block, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bytes(payload))


def _read_blocks(blob, resolution, m, with_logits):
    nx, ny, nz = resolution
    nvox = nx * ny * nz
    arr = np.frombuffer(blob, dtype="<f4")
    expected = nvox * (1 + 3 + m) if with_logits else nvox * 4 * m
    if arr.size != expected:
        raise ValueError(
            f"checkpoint payload has {arr.size} floats, expected {expected}"
        )
    off = 0

    def take(n, shape):
        nonlocal off
        out = arr[off : off + n].reshape(shape).astype(np.float32)
        off += n
        return out

    if with_logits:
        density = np.ascontiguousarray(take(nvox, (nz, ny, nx))[..., None])
        color = np.ascontiguousarray(take(nvox * 3, (nz, ny, nx, 3))[:, :, :, None, :])
        logits = np.empty((nz, ny, nx, m), dtype=np.float32)
        for i in range(m):
            logits[..., i] = take(nvox, (nz, ny, nx))
        return density, color, logits
    density = np.empty((nz, ny, nx, m), dtype=np.float32)
    for i in range(m):
        density[..., i] = take(nvox, (nz, ny, nx))
    color = np.empty((nz, ny, nx, m, 3), dtype=np.float32)
    for i in range(m):
        color[..., i, :] = take(nvox * 3, (nz, ny, nx, 3))
    return density, color, None


def load_checkpoint(path):
    """Load a checkpoint file. Returns (field, header)."""
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable checkpoint header in {path}") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unknown checkpoint format version: {version!r}")
    class_set = ClassSet(tuple(header["classes"]), int(header["background_index"]))
    resolution = tuple(int(v) for v in header["resolution"])
    bounds = (header["bounds"][0], header["bounds"][1])
    model = header.get("model", "ssd")
    if model == "ssd":
        field = VoxelField(resolution, bounds, class_set)
    elif model == "snerf":
        field = SnerfVoxelField(resolution, bounds, class_set)
    else:
        raise ValueError(f"unknown checkpoint model kind: {model!r}")
    field.load_payload(memoryview(blob))
    return field, header
