"""Procedural synthetic scenes with analytically known per-class fields,
a dense quadrature reference renderer, and dataset emission.

The quadrature renderer integrates the continuous multi-class rendering
integral with midpoint-sampled fields and the exact exponential absorption
formula per substep. It shares no code with the discrete compositing
module and serves as its independent oracle. For fields that are constant
over aligned substeps the result is exact up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from ._kernels import njit as _njit, prange as _prange
from .field import ClassSet
from .geometry import Camera, Ray, look_at

SHAPES = ("sphere", "box", "blob", "shell")

_EPS = 1e-12


@dataclass
class Primitive:
    """One analytic shape contributing density to a single class.

    size semantics: sphere -> (radius,), box -> half extents (3,),
    blob -> Gaussian scales (3,), shell -> (inner_radius, outer_radius).
    """

    shape: str
    class_index: int
    center: tuple[float, float, float]
    size: tuple[float, ...]
    density: float
    color: tuple[float, float, float]
    rotation: np.ndarray | None = None  # (3, 3) local-to-world

    def validate(self, m: int, path: str):
        if self.shape not in SHAPES:
            raise ValueError(f"{path}.shape: unknown shape {self.shape!r}")
        if not (0 <= self.class_index < m):
            raise ValueError(f"{path}.class_index: out of range for {m} classes")
        if self.density < 0:
            raise ValueError(f"{path}.density: must be non-negative")
        n_size = {"sphere": 1, "box": 3, "blob": 3, "shell": 2}[self.shape]
        if len(self.size) != n_size:
            raise ValueError(f"{path}.size: expected {n_size} values for {self.shape}")
        if min(self.size) <= 0:
            raise ValueError(f"{path}.size: entries must be positive")
        if self.shape == "shell" and self.size[0] >= self.size[1]:
            raise ValueError(f"{path}.size: shell needs inner < outer radius")
        if len(self.color) != 3 or min(self.color) < 0 or max(self.color) > 1:
            raise ValueError(f"{path}.color: must be RGB in [0, 1]")


@dataclass
class OrbitRig:
    """Ring of inward-looking cameras around a target point."""

    count: int = 32
    radius: float = 3.2
    elevation_deg: float = 18.0
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    width: int = 128
    height: int = 128
    focal_px: float = 140.0
    t_near: float = 0.3
    t_far: float = 8.3
    val_every: int = 4  # every val_every-th view goes to the val split


@dataclass
class MaskNoise:
    """Detector-style outliers: confident wrong labels over blob regions."""

    outlier_rate: float = 0.0
    dilation: int = 0
    tile: int = 8


@dataclass
class SceneSpec:
    name: str
    class_names: tuple[str, ...]
    primitives: list[Primitive]
    rig: OrbitRig = dc_field(default_factory=OrbitRig)
    background_index: int = 0
    scene_bounds: tuple = ((-5.2, -5.2, -5.2), (5.2, 5.2, 5.2))
    noise: MaskNoise = dc_field(default_factory=MaskNoise)

    def validate(self):
        m = len(self.class_names)
        if m < 1:
            raise ValueError("class_names: need at least one class")
        if len(set(self.class_names)) != m:
            raise ValueError("class_names: must be unique")
        if not (0 <= self.background_index < m):
            raise ValueError("background_index: out of range")
        for k, prim in enumerate(self.primitives):
            prim.validate(m, f"primitives[{k}]")
        if self.rig.count < 2:
            raise ValueError("rig.count: need at least 2 cameras for training")
        lo, hi = np.asarray(self.scene_bounds[0]), np.asarray(self.scene_bounds[1])
        if np.any(lo >= hi):
            raise ValueError("scene_bounds: lo must be strictly below hi")
        if not (0.0 <= self.noise.outlier_rate <= 1.0):
            raise ValueError("noise.outlier_rate: must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "name": self.name,
            "classes": list(self.class_names),
            "background_index": self.background_index,
            "scene_bounds": [list(self.scene_bounds[0]), list(self.scene_bounds[1])],
            "primitives": [
                {
                    "shape": p.shape,
                    "class_index": p.class_index,
                    "center": list(p.center),
                    "size": list(p.size),
                    "density": p.density,
                    "color": list(p.color),
                    **(
                        {"rotation": np.asarray(p.rotation).tolist()}
                        if p.rotation is not None
                        else {}
                    ),
                }
                for p in self.primitives
            ],
            "rig": {
                "count": self.rig.count,
                "radius": self.rig.radius,
                "elevation_deg": self.rig.elevation_deg,
                "target": list(self.rig.target),
                "width": self.rig.width,
                "height": self.rig.height,
                "focal_px": self.rig.focal_px,
                "t_near": self.rig.t_near,
                "t_far": self.rig.t_far,
                "val_every": self.rig.val_every,
            },
            "noise": {
                "outlier_rate": self.noise.outlier_rate,
                "dilation": self.noise.dilation,
                "tile": self.noise.tile,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = [
            Primitive(
                shape=p["shape"],
                class_index=int(p["class_index"]),
                center=tuple(p["center"]),
                size=tuple(p["size"]),
                density=float(p["density"]),
                color=tuple(p["color"]),
                rotation=(
                    np.asarray(p["rotation"], dtype=np.float64)
                    if "rotation" in p
                    else None
                ),
            )
            for p in d.get("primitives", [])
        ]
        rig = OrbitRig(**d["rig"]) if "rig" in d else OrbitRig()
        rig.target = tuple(rig.target)
        noise = MaskNoise(**d["noise"]) if "noise" in d else MaskNoise()
        spec = cls(
            name=d.get("name", "scene"),
            class_names=tuple(d["classes"]),
            primitives=prims,
            rig=rig,
            background_index=int(d.get("background_index", 0)),
            scene_bounds=(
                tuple(d["scene_bounds"][0]),
                tuple(d["scene_bounds"][1]),
            ),
            noise=noise,
        )
        spec.validate()
        return spec


_SHAPE_IDS = {"sphere": 0, "box": 1, "blob": 2, "shell": 3}


class AnalyticField:
    """Closure over a primitive list: x -> per-class densities and colors."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.m = len(spec.class_names)
        self.primitives = spec.primitives
        k = len(spec.primitives)
        self._shape_id = np.array(
            [_SHAPE_IDS[p.shape] for p in spec.primitives], dtype=np.int64
        )
        self._class_idx = np.array(
            [p.class_index for p in spec.primitives], dtype=np.int64
        )
        self._center = np.array(
            [p.center for p in spec.primitives], dtype=np.float64
        ).reshape(k, 3)
        self._rot = np.stack(
            [
                np.eye(3) if p.rotation is None else np.asarray(p.rotation)
                for p in spec.primitives
            ]
        ).astype(np.float64) if k else np.zeros((0, 3, 3))
        size = np.zeros((k, 3), dtype=np.float64)
        for i, p in enumerate(spec.primitives):
            size[i, : len(p.size)] = p.size
        self._size = size
        self._amp = np.array([p.density for p in spec.primitives], dtype=np.float64)
        self._pcolor = np.array(
            [p.color for p in spec.primitives], dtype=np.float64
        ).reshape(k, 3)

    def query(self, x):
        """sigma (..., M) and color (..., M, 3) at world positions x."""
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape[:-1]
        pts = x.reshape(-1, 3)
        n = pts.shape[0]
        sigma = np.zeros((n, self.m))
        weighted = np.zeros((n, self.m, 3))
        for prim in self.primitives:
            local = pts - np.asarray(prim.center, dtype=np.float64)
            if prim.rotation is not None:
                local = local @ np.asarray(prim.rotation, dtype=np.float64)
            if prim.shape == "sphere":
                r = np.linalg.norm(local, axis=-1)
                dens = np.where(r <= prim.size[0], prim.density, 0.0)
            elif prim.shape == "shell":
                r = np.linalg.norm(local, axis=-1)
                dens = np.where(
                    (r >= prim.size[0]) & (r <= prim.size[1]), prim.density, 0.0
                )
            elif prim.shape == "box":
                half = np.asarray(prim.size, dtype=np.float64)
                dens = np.where(
                    np.all(np.abs(local) <= half, axis=-1), prim.density, 0.0
                )
            else:  # blob
                s = np.asarray(prim.size, dtype=np.float64)
                q = ((local / s) ** 2).sum(axis=-1)
                dens = prim.density * np.exp(-0.5 * q)
            i = prim.class_index
            sigma[:, i] += dens
            weighted[:, i, :] += dens[:, None] * np.asarray(prim.color)
        inv = np.where(sigma > _EPS, 1.0 / np.where(sigma > _EPS, sigma, 1.0), 0.0)
        color = weighted * inv[..., None]
        return sigma.reshape(*shape, self.m), color.reshape(*shape, self.m, 3)

    def __call__(self, x):
        return self.query(x)


def orbit_cameras(rig: OrbitRig) -> list[Camera]:
    cams = []
    target = np.asarray(rig.target, dtype=np.float64)
    elev = np.deg2rad(rig.elevation_deg)
    for k in range(rig.count):
        azim = 2.0 * np.pi * k / rig.count
        offset = rig.radius * np.array(
            [np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)]
        )
        pose = look_at(target + offset, target)
        cams.append(
            Camera(
                width=rig.width,
                height=rig.height,
                fx=rig.focal_px,
                fy=rig.focal_px,
                cx=rig.width / 2.0,
                cy=rig.height / 2.0,
                cam_to_world=pose,
                t_near=rig.t_near,
                t_far=rig.t_far,
            )
        )
    return cams


def build_scene(spec: SceneSpec):
    """Evaluator, orbit cameras, and the class set for a scene spec."""
    spec.validate()
    field = AnalyticField(spec)
    cameras = orbit_cameras(spec.rig)
    class_set = ClassSet(tuple(spec.class_names), spec.background_index)
    return field, cameras, class_set


@_njit(cache=True, parallel=True)
def _march_primitives(
    shape_id,
    class_idx,
    center,
    rot,
    size,
    amp,
    pcolor,
    m,
    origins,
    dirs,
    t_near,
    t_far,
    steps,
    out_color,
    out_sem,
    out_depth,
    out_acc,
):
    """Fused quadrature march over packed primitives (one thread per ray)."""
    nb = origins.shape[0]
    kprim = shape_id.shape[0]
    h = (t_far - t_near) / steps
    eps = 1e-12
    for r in _prange(nb):
        sig = np.zeros(m)
        wcol = np.zeros((m, 3))
        trans = 1.0
        acc = 0.0
        depth = 0.0
        for i in range(m):
            out_sem[r, i] = 0.0
        for c in range(3):
            out_color[r, c] = 0.0
        for k in range(steps):
            t = t_near + (k + 0.5) * h
            x = origins[r, 0] + t * dirs[r, 0]
            y = origins[r, 1] + t * dirs[r, 1]
            z = origins[r, 2] + t * dirs[r, 2]
            for i in range(m):
                sig[i] = 0.0
                wcol[i, 0] = 0.0
                wcol[i, 1] = 0.0
                wcol[i, 2] = 0.0
            for p in range(kprim):
                dx = x - center[p, 0]
                dy = y - center[p, 1]
                dz = z - center[p, 2]
                lx = rot[p, 0, 0] * dx + rot[p, 1, 0] * dy + rot[p, 2, 0] * dz
                ly = rot[p, 0, 1] * dx + rot[p, 1, 1] * dy + rot[p, 2, 1] * dz
                lz = rot[p, 0, 2] * dx + rot[p, 1, 2] * dy + rot[p, 2, 2] * dz
                sid = shape_id[p]
                dens = 0.0
                if sid == 0:  # sphere
                    if lx * lx + ly * ly + lz * lz <= size[p, 0] * size[p, 0]:
                        dens = amp[p]
                elif sid == 1:  # box
                    if (
                        abs(lx) <= size[p, 0]
                        and abs(ly) <= size[p, 1]
                        and abs(lz) <= size[p, 2]
                    ):
                        dens = amp[p]
                elif sid == 2:  # blob
                    q = (
                        (lx / size[p, 0]) ** 2
                        + (ly / size[p, 1]) ** 2
                        + (lz / size[p, 2]) ** 2
                    )
                    dens = amp[p] * np.exp(-0.5 * q)
                else:  # shell
                    rr = lx * lx + ly * ly + lz * lz
                    if rr >= size[p, 0] * size[p, 0] and rr <= size[p, 1] * size[p, 1]:
                        dens = amp[p]
                if dens > 0.0:
                    ci = class_idx[p]
                    sig[ci] += dens
                    wcol[ci, 0] += dens * pcolor[p, 0]
                    wcol[ci, 1] += dens * pcolor[p, 1]
                    wcol[ci, 2] += dens * pcolor[p, 2]
            sigma_tot = 0.0
            for i in range(m):
                sigma_tot += sig[i]
            a = sigma_tot * h
            alpha = -np.expm1(-a)
            w = trans * alpha
            if sigma_tot > eps:
                inv = 1.0 / sigma_tot
                cb0 = 0.0
                cb1 = 0.0
                cb2 = 0.0
                for i in range(m):
                    cb0 += wcol[i, 0]
                    cb1 += wcol[i, 1]
                    cb2 += wcol[i, 2]
                    out_sem[r, i] += w * (sig[i] * inv)
                out_color[r, 0] += w * cb0 * inv
                out_color[r, 1] += w * cb1 * inv
                out_color[r, 2] += w * cb2 * inv
            depth += w * t
            acc += w
            trans *= np.exp(-a)
        out_depth[r] = depth
        out_acc[r] = acc


def quadrature_render_rays(
    field_query,
    origins,
    dirs,
    t_near: float,
    t_far: float,
    steps: int = 10_000,
    block: int = 512,
):
    """Dense reference rendering of a ray batch.

    ``field_query(pts (K, 3)) -> (sigma (K, M), color (K, M, 3))`` may be an
    AnalyticField or any callable. Marches ``steps`` equal substeps with
    midpoint field evaluation and exact per-substep absorption; substep
    blocks keep memory bounded. AnalyticField inputs run through a compiled
    march with identical semantics. Returns dict with color (B, 3),
    sem (B, M), depth (B,), acc (B,).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    nb = origins.shape[0]
    if isinstance(field_query, AnalyticField):
        out_color = np.empty((nb, 3))
        out_sem = np.empty((nb, field_query.m))
        out_depth = np.empty(nb)
        out_acc = np.empty(nb)
        _march_primitives(
            field_query._shape_id,
            field_query._class_idx,
            field_query._center,
            field_query._rot,
            field_query._size,
            field_query._amp,
            field_query._pcolor,
            field_query.m,
            np.ascontiguousarray(origins),
            np.ascontiguousarray(dirs),
            float(t_near),
            float(t_far),
            steps,
            out_color,
            out_sem,
            out_depth,
            out_acc,
        )
        return {"color": out_color, "sem": out_sem, "depth": out_depth, "acc": out_acc}
    h = (t_far - t_near) / steps
    probe_sigma, _ = field_query(origins[:1])
    m = probe_sigma.shape[-1]
    color = np.zeros((nb, 3))
    sem = np.zeros((nb, m))
    depth = np.zeros(nb)
    acc = np.zeros(nb)
    trans = np.ones(nb)
    for start in range(0, steps, block):
        stop = min(start + block, steps)
        t_mid = t_near + (np.arange(start, stop) + 0.5) * h
        pts = origins[:, None, :] + t_mid[None, :, None] * dirs[:, None, :]
        sigma, col = field_query(pts.reshape(-1, 3))
        sigma = sigma.reshape(nb, stop - start, m)
        col = col.reshape(nb, stop - start, m, 3)
        sigma_tot = sigma.sum(axis=-1)
        inv = np.where(
            sigma_tot > _EPS, 1.0 / np.where(sigma_tot > _EPS, sigma_tot, 1.0), 0.0
        )
        cbar = np.einsum("bkm,bkmc->bkc", sigma, col) * inv[..., None]
        ratio = sigma * inv[..., None]
        a = sigma_tot * h
        seg = np.exp(-a)
        t_start = np.empty_like(seg)
        t_start[:, 0] = trans
        t_start[:, 1:] = trans[:, None] * np.cumprod(seg[:, :-1], axis=1)
        w = t_start * (-np.expm1(-a))
        color += np.einsum("bk,bkc->bc", w, cbar)
        sem += np.einsum("bk,bkm->bm", w, ratio)
        depth += w @ t_mid
        acc += w.sum(axis=1)
        trans = trans * np.prod(seg, axis=1)
    return {"color": color, "sem": sem, "depth": depth, "acc": acc}


def quadrature_render(field_query, ray: Ray, steps: int = 10_000):
    """Reference render of a single ray; see quadrature_render_rays."""
    out = quadrature_render_rays(
        field_query,
        ray.origin[None],
        ray.direction[None],
        ray.t_near,
        ray.t_far,
        steps=steps,
    )
    from .compositing import RenderOutput

    return RenderOutput(
        color=out["color"][0],
        sem_mask=out["sem"][0],
        depth=out["depth"][0],
        acc_alpha=out["acc"][0],
    )


def render_oracle_views(spec: SceneSpec, steps: int = 2048, chunk: int = 4096):
    """Quadrature-render every rig view: (images (V,H,W,3), masks (V,H,W,M))."""
    from .geometry import camera_rays

    field, cameras, class_set = build_scene(spec)
    v = len(cameras)
    h, w = spec.rig.height, spec.rig.width
    images = np.zeros((v, h, w, 3))
    masks = np.zeros((v, h, w, class_set.m))
    for vi, cam in enumerate(cameras):
        origins, dirs = camera_rays(cam)
        for start in range(0, origins.shape[0], chunk):
            sl = slice(start, min(start + chunk, origins.shape[0]))
            out = quadrature_render_rays(
                field, origins[sl], dirs[sl], cam.t_near, cam.t_far, steps=steps
            )
            images[vi].reshape(-1, 3)[sl] = out["color"]
            masks[vi].reshape(-1, class_set.m)[sl] = out["sem"]
    return images, masks


def corrupt_masks(masks, noise: MaskNoise, rng: np.random.Generator):
    """Flip boundary tiles of soft masks to a confident wrong class.

    masks: (V, H, W, M); returns a corrupted copy. A tile is a candidate
    when its hard (argmax) labels are not constant, i.e. it straddles a
    class boundary. Each candidate tile is independently flipped with
    probability ``outlier_rate``: a disk covering the tile (grown by
    ``dilation`` pixels) is painted with the tile's total opacity assigned
    to a uniformly chosen wrong class.
    """
    masks = np.array(masks, copy=True)
    if noise.outlier_rate <= 0.0:
        return masks
    v, h, w, m = masks.shape
    ts = noise.tile
    yy, xx = np.mgrid[0:h, 0:w]
    for vi in range(v):
        hard = np.argmax(masks[vi], axis=-1)
        for ty in range(0, h - ts + 1, ts):
            for tx in range(0, w - ts + 1, ts):
                tile = hard[ty : ty + ts, tx : tx + ts]
                if np.all(tile == tile.flat[0]):
                    continue
                if rng.random() >= noise.outlier_rate:
                    continue
                counts = np.bincount(tile.ravel(), minlength=m)
                dominant = int(np.argmax(counts))
                others = [i for i in range(m) if i != dominant]
                wrong = int(rng.choice(others)) if others else dominant
                cy, cx = ty + ts / 2.0 - 0.5, tx + ts / 2.0 - 0.5
                radius = ts / 2.0 + noise.dilation
                disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
                total = masks[vi].sum(axis=-1)
                for i in range(m):
                    masks[vi][..., i] = np.where(
                        disk, total if i == wrong else 0.0, masks[vi][..., i]
                    )
    return masks


def split_labels(rig: OrbitRig) -> list[str]:
    """Deterministic train/val assignment of rig views."""
    return [
        "val" if (k + 1) % rig.val_every == 0 else "train" for k in range(rig.count)
    ]


def emit_dataset(
    spec: SceneSpec,
    out_dir,
    rng: np.random.Generator | None = None,
    quadrature_steps: int = 2048,
):
    """Render the scene's views and write the dataset directory.

    Layout: scene.json, cameras.json, rgb/<view>.png (8-bit sRGB),
    mask/<class>/<view>.png (16-bit linear), manifest.json. Mask noise from
    the spec is applied to train-split views only; the val split always
    carries clean oracle masks. Returns the manifest dict.
    """
    from . import dataio

    spec.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    images, masks = render_oracle_views(spec, steps=quadrature_steps)
    labels = split_labels(spec.rig)
    if spec.noise.outlier_rate > 0:
        train_idx = [i for i, s in enumerate(labels) if s == "train"]
        masks[train_idx] = corrupt_masks(masks[train_idx], spec.noise, rng)
    _, cameras, _ = build_scene(spec)
    return dataio.write_dataset(out_dir, spec, cameras, images, masks, labels)


def two_blob_scene(
    noise_rate: float = 0.0,
    dilation: int = 0,
    views: int = 32,
    image_size: int = 128,
) -> SceneSpec:
    """The bundled 3-class scene: two overlapping soft blobs inside an
    enclosing background shell."""
    spec = SceneSpec(
        name="blobs3",
        class_names=("background", "blob_warm", "blob_cool"),
        primitives=[
            Primitive(
                shape="shell",
                class_index=0,
                center=(0.0, 0.0, 0.0),
                size=(4.2, 5.0),
                density=14.0,
                color=(0.62, 0.66, 0.72),
            ),
            Primitive(
                shape="blob",
                class_index=1,
                center=(-0.55, -0.10, 0.0),
                size=(0.50, 0.50, 0.50),
                density=14.0,
                color=(0.82, 0.28, 0.20),
            ),
            Primitive(
                shape="blob",
                class_index=2,
                center=(0.62, 0.28, 0.18),
                size=(0.42, 0.42, 0.42),
                density=14.0,
                color=(0.15, 0.35, 0.85),
            ),
        ],
        rig=OrbitRig(count=views, width=image_size, height=image_size),
        noise=MaskNoise(outlier_rate=noise_rate, dilation=dilation),
    )
    spec.validate()
    return spec
