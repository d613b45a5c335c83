"""Procedural multi-view datasets with GAN-style defects, plus the on-disk reader.

Objects are left/right symmetric blobs: an icosphere scaled per axis and
pushed along its normals by a low-order polynomial (equivalently, a
low-order spherical-harmonic) radial field that is even in x. Textures
are smooth procedural patterns in UV space. Defects are injected in image
space after rendering so the clean geometry stays available.

Layout on disk::

    <root>/manifest.json
    <root>/<object_id>/view_<k>.png
    <root>/<object_id>/view_<k>_mask.png
    <root>/<object_id>/cameras.json
    <root>/<object_id>/gt.npz          (optional; clean mesh + texture)
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy import ndimage
from skimage import color

from . import io
from .mesh import DeformedMesh, TemplateMesh, build_icosphere
from .render import Camera, rasterize

DEFAULT_ELEVATION = 20.0
DEFAULT_DISTANCE = 4.0
DEFAULT_FOV = 45.0


@dataclass
class SceneSpec:
    seed: int = 0
    level: int = 3
    amplitude: float = 0.3
    axis_scales: tuple = (0.8, 0.7, 1.15)
    axis_jitter: float = 0.15
    texture_size: int = 64
    palette_size: int = 3
    stripe_frequency: tuple = (1.0, 3.0)
    n_blobs: int = 2

    def __post_init__(self):
        if self.amplitude < 0 or self.axis_jitter < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.amplitude > 0.3:
            raise ValueError("radial amplitude above 0.3 is not guaranteed to stay intersection-free")

    @classmethod
    def sphere(cls, seed: int = 0, **kw) -> "SceneSpec":
        """A unit icosphere: no scaling, jitter or radial perturbation."""
        return cls(seed=seed, amplitude=0.0, axis_scales=(1.0, 1.0, 1.0), axis_jitter=0.0, **kw)


@dataclass
class CorruptionSpec:
    view_inconsistency: float = 0.0
    missing_part_prob: float = 0.0
    missing_part_radius: float = 0.15
    silhouette_noise: int = 0
    hole_prob: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")
        if self.missing_part_prob > 1 or self.hole_prob > 1:
            raise ValueError("probabilities must be at most 1")

    @property
    def is_clean(self) -> bool:
        return (
            self.view_inconsistency == 0
            and self.missing_part_prob == 0
            and self.silhouette_noise == 0
            and self.hole_prob == 0
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultiViewSample:
    object_id: str
    images: torch.Tensor  # (V, 3, H, W) in [0, 1]
    masks: torch.Tensor  # (V, H, W) in [0, 1]
    cameras: list
    gt_vertices: Optional[np.ndarray] = None
    gt_texture: Optional[torch.Tensor] = None
    gt_level: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]


# radial basis: monomials up to degree 3 that are even in x
def _radial_basis(p: np.ndarray) -> np.ndarray:
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    return np.stack(
        [y, z, y * y, z * z, x * x, y * z, y ** 3, z ** 3, x * x * y, x * x * z, y * y * z, y * z * z], axis=1
    )


def _smooth_texture(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    t = spec.texture_size
    c = (np.arange(t) + 0.5) / t
    u, v = np.meshgrid(c, c, indexing="xy")
    palette = rng.uniform(0.1, 0.95, size=(spec.palette_size, 3))
    tex = np.broadcast_to(palette[0][:, None, None], (3, t, t)).copy()

    # horizontal bands
    f = rng.uniform(*spec.stripe_frequency)
    phase = rng.uniform(0, 2 * np.pi)
    band = 0.5 + 0.5 * np.sin(2 * np.pi * f * v + phase)
    tex = tex * (1 - band) + palette[1 % spec.palette_size][:, None, None] * band

    # mirrored blobs
    for k in range(spec.n_blobs):
        cu, cv = rng.uniform(0.3, 0.5), rng.uniform(0.25, 0.75)
        r = rng.uniform(0.06, 0.14)
        col = palette[(2 + k) % spec.palette_size]
        for uu in (cu, 1.0 - cu):
            w = np.exp(-((u - uu) ** 2 + (v - cv) ** 2) / (2 * r * r))
            tex = tex * (1 - w) + col[:, None, None] * w
    return np.clip(tex, 0.0, 1.0)


def generate_scene(spec: SceneSpec) -> tuple[DeformedMesh, torch.Tensor]:
    """Deterministic (mesh, texture) for a scene spec; texture is (3, T, T)."""
    rng = np.random.default_rng(spec.seed)
    template = build_icosphere(spec.level)
    p = template.vertices
    coef = rng.normal(size=12)
    field_ = _radial_basis(p) @ coef
    peak = np.abs(field_).max()
    scale = spec.amplitude * rng.uniform(0.5, 1.0) / peak if peak > 0 else 0.0
    radius = 1.0 + scale * field_
    axes = np.asarray(spec.axis_scales) * (1.0 + spec.axis_jitter * rng.uniform(-1, 1, size=3))
    verts = p * radius[:, None] * axes[None]
    tex = _smooth_texture(rng, spec)
    return DeformedMesh(torch.as_tensor(verts), template), torch.as_tensor(tex, dtype=torch.float32)


def view_cameras(
    n_views: int,
    image_size: int,
    elevation: float = DEFAULT_ELEVATION,
    distance: float = DEFAULT_DISTANCE,
    fov: float = DEFAULT_FOV,
) -> list[Camera]:
    return [Camera(360.0 * k / n_views, elevation, distance, fov, image_size) for k in range(n_views)]


def render_views(
    mesh: DeformedMesh,
    texture: torch.Tensor,
    n_views: int = 8,
    image_size: int = 64,
    object_id: str = "obj",
    **camera_kw,
) -> MultiViewSample:
    """Render evenly spaced azimuths; masks are the renderer's hard coverage."""
    cams = view_cameras(n_views, image_size, **camera_kw)
    verts = mesh.batched().to(torch.float64)
    verts = verts.expand(n_views, -1, -1)
    tex = texture.to(torch.float64)[None].expand(n_views, -1, -1, -1)
    with torch.no_grad():
        out = rasterize(DeformedMesh(verts, mesh.template), tex, cams, need_soft=False)
    return MultiViewSample(
        object_id=object_id,
        images=out.image.float().clamp(0, 1),
        masks=out.coverage.float(),
        cameras=cams,
        gt_vertices=mesh.batched()[0].detach().cpu().numpy().astype(np.float64),
        gt_texture=texture.float(),
        gt_level=None,
    )


def _disk(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def hue_shift(image: np.ndarray, shift: float, brightness: float) -> np.ndarray:
    """Rotate hue by ``shift`` (fraction of a turn) and scale value by ``brightness``; (H, W, 3) in/out."""
    hsv = color.rgb2hsv(image)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * brightness, 0.0, 1.0)
    return color.hsv2rgb(hsv)


def corrupt(sample: MultiViewSample, spec: CorruptionSpec, rng: np.random.Generator) -> MultiViewSample:
    """Apply independent per-view defects; a clean spec returns an identical copy."""
    out = copy.deepcopy(sample)
    if spec.is_clean:
        return out
    images = out.images.numpy().transpose(0, 2, 3, 1).astype(np.float64)
    masks = out.masks.numpy().astype(np.float64)
    n, h, w = masks.shape
    log = []
    for k in range(n):
        entry = {}
        img, m = images[k], masks[k]
        if spec.view_inconsistency > 0:
            a = spec.view_inconsistency
            shift = a * rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
            bright = 1.0 + a * rng.uniform(-1.0, 1.0)
            img = hue_shift(img, shift, bright) * (m[..., None] > 0)
            entry["hue_shift"] = float(shift)
            entry["brightness"] = float(bright)
        if spec.missing_part_prob > 0 and rng.uniform() < spec.missing_part_prob:
            ys, xs = np.nonzero(m > 0.5)
            if len(ys):
                i = rng.integers(len(ys))
                r = spec.missing_part_radius * w
                hole = _disk(h, w, ys[i] + 0.5, xs[i] + 0.5, r)
                img = img * ~hole[..., None]
                m = m * ~hole
                entry["erased"] = [float(ys[i] + 0.5), float(xs[i] + 0.5), float(r)]
        if spec.silhouette_noise > 0:
            struct = ndimage.iterate_structure(ndimage.generate_binary_structure(2, 1), spec.silhouette_noise)
            if rng.uniform() < 0.5:
                m = ndimage.binary_dilation(m > 0.5, struct).astype(np.float64)
                entry["mask_op"] = "dilate"
            else:
                m = ndimage.binary_erosion(m > 0.5, struct).astype(np.float64)
                entry["mask_op"] = "erode"
        if spec.hole_prob > 0 and rng.uniform() < spec.hole_prob:
            ys, xs = np.nonzero(m > 0.5)
            if len(ys):
                i = rng.integers(len(ys))
                m = m * ~_disk(h, w, ys[i] + 0.5, xs[i] + 0.5, max(1.5, 0.04 * w))
                entry["hole"] = True
        images[k], masks[k] = img, m
        log.append(entry)
    out.images = torch.from_numpy(np.clip(images, 0, 1).transpose(0, 3, 1, 2)).float().contiguous()
    out.masks = torch.from_numpy(masks).float()
    out.meta = dict(out.meta, corruption=log)
    return out


def generate_dataset(
    n_objects: int,
    n_views: int = 8,
    seed: int = 0,
    corruption: Optional[CorruptionSpec] = None,
    image_size: int = 64,
    scene: Optional[SceneSpec] = None,
    **camera_kw,
) -> list[MultiViewSample]:
    """``n_objects`` scenes seeded from ``seed``, rendered and (optionally) corrupted."""
    corruption = corruption or CorruptionSpec()
    base = scene or SceneSpec()
    samples = []
    for i in range(n_objects):
        obj_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        spec = SceneSpec(**{**asdict(base), "seed": obj_seed})
        mesh, tex = generate_scene(spec)
        s = render_views(mesh, tex, n_views, image_size, object_id=f"obj_{i:05d}", **camera_kw)
        s.gt_level = spec.level
        s = corrupt(s, corruption, np.random.default_rng([seed, i, 1]))
        samples.append(s)
    return samples


def write_dataset(samples, root, corruption: Optional[CorruptionSpec] = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        d = root / s.object_id
        d.mkdir(exist_ok=True)
        for k in range(s.n_views):
            io.save_png(d / f"view_{k}.png", s.images[k])
            io.save_png(d / f"view_{k}_mask.png", s.masks[k])
        with open(d / "cameras.json", "w") as f:
            json.dump([c.to_dict() for c in s.cameras], f, indent=1)
        if s.gt_vertices is not None and s.gt_texture is not None:
            np.savez(
                d / "gt.npz",
                vertices=s.gt_vertices,
                texture=s.gt_texture.numpy(),
                level=-1 if s.gt_level is None else s.gt_level,
            )
    manifest = {
        "object_ids": [s.object_id for s in samples],
        "resolution": samples[0].image_size if samples else None,
        "n_views": samples[0].n_views if samples else None,
        "corruption": (corruption or CorruptionSpec()).to_dict(),
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def read_dataset(root) -> list[MultiViewSample]:
    """Load a dataset directory; works for any data laid out as described above."""
    root = Path(root)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    ids = manifest["object_ids"]
    on_disk = sorted(p.name for p in root.iterdir() if p.is_dir())
    if sorted(ids) != on_disk:
        raise ValueError(f"manifest lists {len(ids)} objects but {root} holds {len(on_disk)} object directories")
    samples = []
    for oid in ids:
        d = root / oid
        with open(d / "cameras.json") as f:
            cam_dicts = json.load(f)
        images, masks, cams = [], [], []
        for k, cd in enumerate(cam_dicts):
            img_path, mask_path = d / f"view_{k}.png", d / f"view_{k}_mask.png"
            if not img_path.exists():
                raise FileNotFoundError(f"{oid}: missing image for view {k} ({img_path})")
            if not mask_path.exists():
                raise FileNotFoundError(f"{oid}: missing silhouette for view {k} ({mask_path})")
            img = io.load_png(img_path)
            images.append(img)
            masks.append(io.load_png(mask_path, mode="L"))
            cams.append(Camera.from_dict(cd, image_size=img.shape[-1]))
        s = MultiViewSample(oid, torch.stack(images), torch.stack(masks), cams)
        gt = d / "gt.npz"
        if gt.exists():
            z = np.load(gt)
            s.gt_vertices = z["vertices"]
            s.gt_texture = torch.from_numpy(z["texture"])
            s.gt_level = int(z["level"]) if int(z["level"]) >= 0 else None
        samples.append(s)
    return samples


def gt_mesh(sample: MultiViewSample, template: Optional[TemplateMesh] = None) -> DeformedMesh:
    if sample.gt_vertices is None or sample.gt_level is None:
        raise ValueError(f"{sample.object_id} carries no ground-truth geometry")
    template = template or build_icosphere(sample.gt_level)
    return DeformedMesh(torch.as_tensor(sample.gt_vertices), template)
