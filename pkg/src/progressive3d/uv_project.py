"""Inverse rendering of view images into UV texture space.

Each texel is located on the surface through the template's UV layout,
projected into the view and coloured by bilinear lookup in the image.
A texel counts as visible when its face points towards the camera, it
survives the depth test against the renderer's z-buffer and every pixel
in its bilinear footprint is covered by the mesh.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .mesh import DeformedMesh, TemplateMesh, face_normals
from .render import Camera, CameraArg, _camera_list, project_vertices, rasterize, zbuffer_at_points

# relative to camera distance
DEPTH_EPS = 1e-3


@dataclass
class PartialTexture:
    texture: torch.Tensor  # (B, 3, T, T), zero where not visible
    visibility: torch.Tensor  # (B, T, T), {0, 1}
    source_view: Optional[list] = None


@dataclass(frozen=True)
class UVRaster:
    """Texel -> (face, barycentric) lookup for one template and texture size."""

    texel: np.ndarray  # (K,) flat texel index
    face: np.ndarray  # (K,)
    bary: np.ndarray  # (K, 3)
    size: int


def uv_raster(template: TemplateMesh, size: int) -> UVRaster:
    """Rasterize the template's UV triangles at texel centres (cached)."""
    key = ("uv_raster", size)
    if key in template._cache:
        return template._cache[key]

    corner = template.uv[template.faces_uv] * size  # (F, 3, 2) in texel units
    face_ids = np.arange(template.num_faces)
    # seam faces extend past u = 1; rasterize them again shifted by one period
    wrapped = corner[:, :, 0].max(axis=1) > size
    shifted = corner[wrapped].copy()
    shifted[:, :, 0] -= size
    tris = np.concatenate([corner, shifted])
    ids = np.concatenate([face_ids, face_ids[wrapped]])

    lo = np.ceil(tris.min(axis=1) - 0.5).astype(np.int64).clip(0, size - 1)
    hi = np.floor(tris.max(axis=1) - 0.5).astype(np.int64).clip(0, size - 1)
    n = np.maximum(hi - lo + 1, 0)
    count = n[:, 0] * n[:, 1]
    tri_idx = np.repeat(np.arange(len(tris)), count)
    k = np.arange(tri_idx.size) - np.repeat(np.cumsum(count) - count, count)
    nx = n[tri_idx, 0]
    px = lo[tri_idx, 0] + k % nx
    py = lo[tri_idx, 1] + k // nx
    qx, qy = px + 0.5, py + 0.5

    a, b, c = tris[tri_idx, 0], tris[tri_idx, 1], tris[tri_idx, 2]

    def edge(p0, p1, x, y):
        return (p1[:, 0] - p0[:, 0]) * (y - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (x - p0[:, 0])

    area = edge(a, b, c[:, 0], c[:, 1])
    ok = np.abs(area) > 1e-12
    area = np.where(ok, area, 1.0)
    lam = np.stack([edge(b, c, qx, qy), edge(c, a, qx, qy), edge(a, b, qx, qy)], axis=1) / area[:, None]
    inside = ok & (lam >= -1e-9).all(axis=1)

    texel = (py * size + px)[inside]
    face = ids[tri_idx][inside]
    lam = lam[inside]
    # one face per texel: the lowest id among those containing it
    order = np.lexsort((face, texel))
    texel, face, lam = texel[order], face[order], lam[order]
    first = np.concatenate([[True], texel[1:] != texel[:-1]])
    raster = UVRaster(texel=texel[first], face=face[first], bary=lam[first], size=size)
    template._cache[key] = raster
    return raster


def _bilinear_image(image: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) images at (B, N, 2) pixel coordinates, clamped."""
    b, c, h, w = image.shape
    x = xy[..., 0] - 0.5
    y = xy[..., 1] - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0, y0 = x0.long(), y0.long()
    xa, xb = x0.clamp(0, w - 1), (x0 + 1).clamp(0, w - 1)
    ya, yb = y0.clamp(0, h - 1), (y0 + 1).clamp(0, h - 1)
    flat = image.permute(0, 2, 3, 1).reshape(b, h * w, c)

    def g(yy, xx):
        return torch.gather(flat, 1, (yy * w + xx)[..., None].expand(-1, -1, c))

    return (g(ya, xa) * (1 - fx) + g(ya, xb) * fx) * (1 - fy) + (g(yb, xa) * (1 - fx) + g(yb, xb) * fx) * fy


def _footprint_covered(coverage: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """True where all four pixels of the bilinear stencil at ``xy`` are covered."""
    b, h, w = coverage.shape
    x0 = torch.floor(xy[..., 0] - 0.5).long()
    y0 = torch.floor(xy[..., 1] - 0.5).long()
    flat = coverage.reshape(b, -1)
    ok = torch.ones_like(x0, dtype=torch.bool)
    for dy in (0, 1):
        for dx in (0, 1):
            xx = (x0 + dx).clamp(0, w - 1)
            yy = (y0 + dy).clamp(0, h - 1)
            ok &= torch.gather(flat, 1, yy * w + xx) > 0.5
    return ok


def project_image_to_uv(
    image: torch.Tensor,
    mesh: DeformedMesh,
    cams: CameraArg,
    texture_size: int,
    source_view=None,
) -> PartialTexture:
    """Project view images (B, 3, H, W) onto the UV map of ``mesh``.

    Produces training targets, so nothing here carries gradients.
    """
    with torch.no_grad():
        image = image.detach()
        if image.dim() == 3:
            image = image[None]
        mesh = mesh.detach()
        verts = mesh.batched()
        bsz = verts.shape[0]
        cams = _camera_list(cams, bsz)
        template = mesh.template
        dtype, device = verts.dtype, verts.device
        image = image.to(dtype)
        size = cams[0].image_size
        if image.shape[-1] != size or image.shape[-2] != size:
            raise ValueError(f"image is {tuple(image.shape[-2:])}, camera expects {size}x{size}")

        raster = uv_raster(template, texture_size)
        faces = torch.as_tensor(template.faces, device=device)
        face = torch.as_tensor(raster.face, device=device)
        bary = torch.as_tensor(raster.bary, dtype=dtype, device=device)
        tri = verts[:, faces[face]]  # (B, K, 3, 3)
        points = (bary[None, :, :, None] * tri).sum(dim=2)  # (B, K, 3)

        xy, z, clipped = project_vertices(points, cams)
        zbuf, _ = zbuffer_at_points(mesh, cams, xy)

        eye = torch.as_tensor(np.stack([c.eye for c in cams]), dtype=dtype, device=device)
        normals = face_normals(verts, template.faces)[:, face]
        front = (normals * (eye[:, None] - points)).sum(-1) > 0

        scale = torch.as_tensor([c.distance for c in cams], dtype=dtype, device=device)[:, None]
        unoccluded = torch.isfinite(zbuf) & ((z - zbuf).abs() <= DEPTH_EPS * scale)

        coverage = rasterize(mesh, None, cams, need_soft=False).coverage
        covered = _footprint_covered(coverage, xy)
        visible = front & unoccluded & covered & ~clipped

        colors = _bilinear_image(image, xy)
        colors = colors * visible[..., None].to(dtype)

        n_tex = texture_size * texture_size
        texel = torch.as_tensor(raster.texel, device=device)
        tex = torch.zeros(bsz, n_tex, 3, dtype=dtype, device=device)
        tex[:, texel] = colors
        vis = torch.zeros(bsz, n_tex, dtype=dtype, device=device)
        vis[:, texel] = visible.to(dtype)

        return PartialTexture(
            texture=tex.reshape(bsz, texture_size, texture_size, 3).permute(0, 3, 1, 2).contiguous(),
            visibility=vis.reshape(bsz, texture_size, texture_size),
            source_view=source_view,
        )


def make_fake_pair(generated: torch.Tensor, real: PartialTexture) -> torch.Tensor:
    """Mask a generated texture (B, 3, T, T) with the real example's visibility."""
    if generated.shape[-2:] != real.visibility.shape[-2:] or generated.shape[0] != real.visibility.shape[0]:
        raise ValueError(
            f"generated texture {tuple(generated.shape)} does not match visibility {tuple(real.visibility.shape)}"
        )
    return generated * real.visibility[:, None].to(generated.dtype)


def check_fake_support(fake: torch.Tensor, visibility: torch.Tensor) -> None:
    """Raise if a fake candidate has non-zero texels outside the visibility mask."""
    outside = (fake.detach().abs().sum(dim=1) > 0) & (visibility <= 0)
    if outside.any():
        raise AssertionError(f"fake texture has {int(outside.sum())} texels outside its visibility mask")


def build_gan_batch(samples, prediction, view1, view2):
    """Conditioning (view 1), real (view 2) and masked fake textures.

    ``samples`` is one multi-view sample or a sequence with one per batch
    item (anything with ``images`` (V, 3, H, W) and ``cameras``);
    ``view1``/``view2`` are view indices, scalar or per item. Both
    projections use the prediction's current mesh.
    """
    if hasattr(samples, "images"):
        samples = [samples]
    samples = list(samples)
    n = len(samples)
    view1 = [int(v) for v in (view1 if hasattr(view1, "__len__") else [view1] * n)]
    view2 = [int(v) for v in (view2 if hasattr(view2, "__len__") else [view2] * n)]
    if len(view1) != n or len(view2) != n:
        raise ValueError("need one view index per sample")
    if any(a == b for a, b in zip(view1, view2)):
        raise ValueError("conditioning and real views must differ")
    size = prediction.texture.shape[-1]
    img1 = torch.stack([s.images[v] for s, v in zip(samples, view1)])
    img2 = torch.stack([s.images[v] for s, v in zip(samples, view2)])
    cam1 = [s.cameras[v] for s, v in zip(samples, view1)]
    cam2 = [s.cameras[v] for s, v in zip(samples, view2)]
    cond = project_image_to_uv(img1, prediction.mesh, cam1, size, view1)
    real = project_image_to_uv(img2, prediction.mesh, cam2, size, view2)
    fake = make_fake_pair(prediction.texture, real)
    check_fake_support(fake, real.visibility)
    return cond, real, fake
