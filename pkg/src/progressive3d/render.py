"""Differentiable rasterizer.

Colour comes from a hard z-buffer: each pixel takes the nearest covering
face, interpolates its UVs with perspective-correct barycentrics and
samples the texture bilinearly. The silhouette is a soft, SoftRas-style
aggregate ``1 - prod_f (1 - sigmoid(sign * d^2 / sigma))`` over faces,
where ``d`` is the pixel-to-triangle-boundary distance in NDC units.

Pixel/face work is restricted to candidate pairs found from each face's
screen bounding box (grown by the distance beyond which a face's soft
contribution underflows), so cost scales with covered area, not
``pixels * faces``.

Screen convention: pixel ``(row i, col j)`` has its centre at
``(j + 0.5, i + 0.5)``; x grows right, y grows down. NDC spans [-1, 1]
with +y up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .mesh import DeformedMesh

NEAR_PLANE = 0.1
DEFAULT_SIGMA = 1e-4
# soft contributions with d^2 / sigma above this are below ~1e-13
_SOFT_CUTOFF = 30.0
_DEPTH_TIE = 1e-7
_DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class Camera:
    """Look-at camera orbiting the origin; angles in degrees, +y is up."""

    azimuth: float = 0.0
    elevation: float = 0.0
    distance: float = 4.0
    fov: float = 45.0
    image_size: int = 64

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError(f"camera distance must be positive, got {self.distance}")
        if not 0 < self.fov < 180:
            raise ValueError(f"fov must lie in (0, 180), got {self.fov}")
        if abs(self.elevation) >= 90:
            raise ValueError("elevation must lie strictly between -90 and 90 degrees")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")

    @property
    def eye(self) -> np.ndarray:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        return self.distance * np.array(
            [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
        )

    def rotation(self) -> np.ndarray:
        """Rows are the camera right, up and forward axes in world space."""
        eye = self.eye
        forward = -eye / np.linalg.norm(eye)
        right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return np.stack([right, up, forward])

    @property
    def focal(self) -> float:
        return 1.0 / math.tan(math.radians(self.fov) / 2.0)

    def to_dict(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "distance": self.distance,
            "fov": self.fov,
        }

    @classmethod
    def from_dict(cls, d: dict, image_size: Optional[int] = None) -> "Camera":
        size = image_size if image_size is not None else d.get("image_size", 64)
        return cls(
            azimuth=float(d["azimuth"]),
            elevation=float(d["elevation"]),
            distance=float(d["distance"]),
            fov=float(d["fov"]),
            image_size=int(size),
        )


@dataclass
class RenderOutput:
    image: torch.Tensor  # (B, 3, H, W)
    silhouette: torch.Tensor  # (B, H, W), soft
    depth: torch.Tensor  # (B, H, W), +inf on background
    coverage: torch.Tensor  # (B, H, W), hard 0/1
    face_index: torch.Tensor  # (B, H, W), -1 on background


CameraArg = Union[Camera, Sequence[Camera]]


def _camera_list(cams: CameraArg, batch: int) -> list[Camera]:
    if isinstance(cams, Camera):
        return [cams] * batch
    cams = list(cams)
    if len(cams) != batch:
        raise ValueError(f"got {len(cams)} cameras for a batch of {batch}")
    return cams


def _image_size(cams: list[Camera]) -> int:
    sizes = {c.image_size for c in cams}
    if len(sizes) != 1:
        raise ValueError("all cameras in a batch must share image_size")
    return sizes.pop()


def _batched_vertices(mesh_or_verts) -> torch.Tensor:
    if isinstance(mesh_or_verts, DeformedMesh):
        return mesh_or_verts.batched()
    v = torch.as_tensor(mesh_or_verts)
    return v if v.dim() == 3 else v[None]


def project_vertices(mesh, cams: CameraArg):
    """Project vertices to pixel coordinates.

    Returns ``(xy, z, clipped)`` with ``xy`` (B, V, 2) in pixels, ``z``
    (B, V) the camera-space depth along the view axis and ``clipped`` (B, V)
    flagging vertices in front of the near plane.
    """
    verts = _batched_vertices(mesh)
    cams = _camera_list(cams, verts.shape[0])
    size = _image_size(cams)
    dtype, device = verts.dtype, verts.device
    eye = torch.as_tensor(np.stack([c.eye for c in cams]), dtype=dtype, device=device)
    rot = torch.as_tensor(np.stack([c.rotation() for c in cams]), dtype=dtype, device=device)
    focal = torch.as_tensor([c.focal for c in cams], dtype=dtype, device=device)

    cam_pts = torch.einsum("bij,bvj->bvi", rot, verts - eye[:, None])
    z = cam_pts[..., 2]
    clipped = z < NEAR_PLANE
    z_safe = torch.where(clipped, torch.full_like(z, NEAR_PLANE), z)
    ndc = cam_pts[..., :2] * (focal[:, None, None] / z_safe[..., None])
    half = size / 2.0
    xy = torch.stack([(ndc[..., 0] + 1.0) * half, (1.0 - ndc[..., 1]) * half], dim=-1)
    return xy, z, clipped


def _edge(p0x, p0y, p1x, p1y, qx, qy):
    return (p1x - p0x) * (qy - p0y) - (p1y - p0y) * (qx - p0x)


def _segment_d2(p0x, p0y, p1x, p1y, qx, qy):
    ex, ey = p1x - p0x, p1y - p0y
    wx, wy = qx - p0x, qy - p0y
    t = ((wx * ex + wy * ey) / (ex * ex + ey * ey).clamp_min(1e-20)).clamp(0.0, 1.0)
    dx, dy = wx - t * ex, wy - t * ey
    return dx * dx + dy * dy


class _Scene:
    """Flattened screen-space triangles of a batch, ready for pair queries."""

    def __init__(self, verts: torch.Tensor, faces: np.ndarray, cams: list[Camera]):
        self.batch, self.num_verts = verts.shape[:2]
        self.size = _image_size(cams)
        self.cams = cams
        xy, z, clipped = project_vertices(verts, cams)
        self.xy, self.z = xy, z
        faces_t = torch.as_tensor(faces, dtype=torch.long, device=verts.device)
        self.num_faces = faces_t.shape[0]
        offs = torch.arange(self.batch, device=verts.device) * self.num_verts
        self.gfaces = (faces_t[None] + offs[:, None, None]).reshape(-1, 3)
        self.face_batch = torch.arange(self.batch, device=verts.device).repeat_interleave(self.num_faces)

        flat_xy = xy.reshape(-1, 2)
        flat_clip = clipped.reshape(-1)
        with torch.no_grad():
            tri = flat_xy.detach()[self.gfaces]  # (BF, 3, 2)
            area = _edge(tri[:, 0, 0], tri[:, 0, 1], tri[:, 1, 0], tri[:, 1, 1], tri[:, 2, 0], tri[:, 2, 1])
            valid = ~flat_clip[self.gfaces].any(dim=1) & (area.abs() > _DEGENERATE_AREA)
            valid &= torch.isfinite(tri).all(dim=2).all(dim=1)
        self.tri_det = tri
        self.valid = valid

    def candidate_pairs(self, margin: float):
        """All (face, pixel) pairs whose pixel centre lies in the face bbox +- margin."""
        size = self.size
        tri = self.tri_det
        device = tri.device
        if tri.shape[0] == 0:
            empty = torch.zeros(0, dtype=torch.long, device=device)
            return empty, empty
        lo = tri.min(dim=1).values - margin - 0.5
        hi = tri.max(dim=1).values + margin - 0.5
        c0 = torch.ceil(lo).clamp(min=0).long()
        c1 = torch.floor(hi).clamp(max=size - 1).long()
        n = (c1 - c0 + 1).clamp(min=0)
        n = torch.where(self.valid[:, None], n, torch.zeros_like(n))
        count = n[:, 0] * n[:, 1]
        face = torch.repeat_interleave(torch.arange(tri.shape[0], device=device), count)
        start = torch.cumsum(count, 0) - count
        k = torch.arange(face.shape[0], device=device) - start[face]
        nx = n[face, 0]
        px = c0[face, 0] + k % nx
        py = c0[face, 1] + torch.div(k, nx, rounding_mode="floor")
        pix = self.face_batch[face] * size * size + py * size + px
        return face, pix

    def point_pairs(self, points: torch.Tensor):
        """(face, point) pairs for arbitrary screen points (B, N, 2), binned by pixel cell."""
        size = self.size
        device = points.device
        b, n = points.shape[:2]
        flat = points.reshape(-1, 2)
        inside = torch.isfinite(flat).all(dim=1)
        inside &= (flat[:, 0] >= 0) & (flat[:, 0] < size) & (flat[:, 1] >= 0) & (flat[:, 1] < size)
        cx = torch.floor(flat[:, 0].clamp(0, size - 1e-6)).long()
        cy = torch.floor(flat[:, 1].clamp(0, size - 1e-6)).long()
        batch_id = torch.arange(b, device=device).repeat_interleave(n)
        cell = batch_id * size * size + cy * size + cx
        cell = torch.where(inside, cell, torch.full_like(cell, -1))

        n_cells = self.batch * size * size
        keep = torch.nonzero(cell >= 0).squeeze(1)
        order = keep[torch.argsort(cell[keep], stable=True)]
        counts = torch.bincount(cell[keep], minlength=n_cells)
        cell_start = torch.cumsum(counts, 0) - counts

        # faces cover cells [floor(min), floor(max)] on each axis
        tri = self.tri_det
        if tri.shape[0] == 0 or keep.numel() == 0:
            empty = torch.zeros(0, dtype=torch.long, device=device)
            return empty, empty
        c0 = torch.floor(tri.min(dim=1).values).clamp(min=0).long()
        c1 = torch.floor(tri.max(dim=1).values).clamp(max=size - 1).long()
        nn_ = (c1 - c0 + 1).clamp(min=0)
        nn_ = torch.where(self.valid[:, None], nn_, torch.zeros_like(nn_))
        count = nn_[:, 0] * nn_[:, 1]
        face = torch.repeat_interleave(torch.arange(tri.shape[0], device=device), count)
        start = torch.cumsum(count, 0) - count
        k = torch.arange(face.shape[0], device=device) - start[face]
        nx = nn_[face, 0]
        gx = c0[face, 0] + k % nx
        gy = c0[face, 1] + torch.div(k, nx, rounding_mode="floor")
        fcell = self.face_batch[face] * size * size + gy * size + gx

        m = counts[fcell]
        pair_face = torch.repeat_interleave(face, m)
        first = torch.repeat_interleave(cell_start[fcell], m)
        offs = torch.cumsum(m, 0) - m
        j = torch.arange(pair_face.shape[0], device=device) - torch.repeat_interleave(offs, m)
        pair_point = order[first + j]
        return pair_face, pair_point

    def geometry(self, face: torch.Tensor, qx: torch.Tensor, qy: torch.Tensor, detach: bool = False):
        """Screen-space barycentrics and depth of points against their paired faces."""
        xy = self.xy.reshape(-1, 2)
        z = self.z.reshape(-1)
        if detach:
            xy, z = xy.detach(), z.detach()
        idx = self.gfaces[face]
        a, b, c = xy[idx[:, 0]], xy[idx[:, 1]], xy[idx[:, 2]]
        area = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], c[:, 0], c[:, 1])
        l0 = _edge(b[:, 0], b[:, 1], c[:, 0], c[:, 1], qx, qy) / area
        l1 = _edge(c[:, 0], c[:, 1], a[:, 0], a[:, 1], qx, qy) / area
        l2 = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], qx, qy) / area
        lam = torch.stack([l0, l1, l2], dim=1)
        zf = z[idx]
        inv = (lam / zf).sum(dim=1)
        return lam, inv, zf, (a, b, c)


def _zbuffer(face: torch.Tensor, target: torch.Tensor, n_targets: int, depth: torch.Tensor):
    """Nearest face per target with ties (< 1e-7) resolved to the lowest face id.

    Returns the index into the pair arrays of each winning pair and the
    target it belongs to.
    """
    device = depth.device
    zmin = torch.full((n_targets,), math.inf, dtype=depth.dtype, device=device)
    zmin = zmin.scatter_reduce(0, target, depth, reduce="amin", include_self=True)
    near = depth <= zmin[target] + _DEPTH_TIE
    big = torch.iinfo(torch.long).max
    fmin = torch.full((n_targets,), big, dtype=torch.long, device=device)
    cand_face = torch.where(near, face, torch.full_like(face, big))
    fmin = fmin.scatter_reduce(0, target, cand_face, reduce="amin", include_self=True)
    win = near & (face == fmin[target])
    win_idx = torch.nonzero(win).squeeze(1)
    return win_idx, target[win_idx]


def sample_texture(texture: torch.Tensor, batch_index: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup in (B, C, H, W) textures, wrapping in u and clamping in v.

    ``batch_index`` (N,) selects the texture of each query; ``uv`` is (N, 2).
    Returns (N, C).
    """
    b, c, h, w = texture.shape
    flat = texture.permute(0, 2, 3, 1).reshape(-1, c)
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0 = x0.long()
    y0 = y0.long()
    xa = torch.remainder(x0, w)
    xb = torch.remainder(x0 + 1, w)
    ya = y0.clamp(0, h - 1)
    yb = (y0 + 1).clamp(0, h - 1)
    base = batch_index * (h * w)
    v00 = flat[base + ya * w + xa]
    v01 = flat[base + ya * w + xb]
    v10 = flat[base + yb * w + xa]
    v11 = flat[base + yb * w + xb]
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy


def _soft_margin_pixels(sigma: float, size: int) -> float:
    return math.sqrt(_SOFT_CUTOFF * sigma) * size / 2.0


def rasterize(
    mesh: DeformedMesh,
    texture: Optional[torch.Tensor],
    cams: CameraArg,
    sigma: float = DEFAULT_SIGMA,
    need_soft: bool = True,
) -> RenderOutput:
    """Render image, soft silhouette and depth for a batch of meshes.

    ``texture`` is (B, 3, Ht, Wt) in [0, 1] (or None for silhouette-only
    use). ``cams`` is one camera or one per batch item.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    verts = mesh.batched()
    template = mesh.template
    cams = _camera_list(cams, verts.shape[0])
    size = _image_size(cams)
    bsz = verts.shape[0]
    dtype, device = verts.dtype, verts.device
    n_pix = bsz * size * size

    if texture is not None and texture.dim() == 3:
        texture = texture[None].expand(bsz, -1, -1, -1)

    image = torch.zeros(n_pix, 3, dtype=dtype, device=device)
    depth = torch.full((n_pix,), math.inf, dtype=dtype, device=device)
    coverage = torch.zeros(n_pix, dtype=dtype, device=device)
    face_index = torch.full((n_pix,), -1, dtype=torch.long, device=device)
    acc = torch.zeros(n_pix, dtype=dtype, device=device)

    if template.num_faces > 0 and verts.shape[1] > 0:
        scene = _Scene(verts, template.faces, cams)
        margin = _soft_margin_pixels(sigma, size) if need_soft else 0.0
        face, pix = scene.candidate_pairs(margin)
        local = torch.remainder(pix, size * size)
        qx = (torch.remainder(local, size) + 0.5).to(dtype)
        qy = (torch.div(local, size, rounding_mode="floor") + 0.5).to(dtype)

        # hard z-buffer on detached geometry
        with torch.no_grad():
            lam, inv, _, _ = scene.geometry(face, qx, qy, detach=True)
            inside = (lam >= 0).all(dim=1) & (inv > 0)
            in_idx = torch.nonzero(inside).squeeze(1)
            win, win_pix = _zbuffer(face[in_idx], pix[in_idx], n_pix, 1.0 / inv[in_idx])
            win = in_idx[win]

        if win.numel() > 0:
            wf = face[win]
            lam_w, inv_w, zf_w, _ = scene.geometry(wf, qx[win], qy[win])
            depth = depth.index_put((win_pix,), 1.0 / inv_w)
            coverage = coverage.index_put((win_pix,), torch.ones_like(inv_w))
            face_index = face_index.index_put((win_pix,), torch.remainder(wf, template.num_faces))
            if texture is not None:
                persp = (lam_w / zf_w) / inv_w[:, None]
                fuv = torch.as_tensor(template.faces_uv, device=device)
                corner_uv = torch.as_tensor(template.uv, dtype=dtype, device=device)[
                    fuv[torch.remainder(wf, template.num_faces)]
                ]
                uv = (persp[:, :, None] * corner_uv).sum(dim=1)
                color = sample_texture(texture.to(dtype), scene.face_batch[wf], uv)
                image = image.index_put((win_pix,), color)

        if need_soft and face.numel() > 0:
            _, _, _, (a, b, c) = scene.geometry(face, qx, qy)
            d2 = torch.minimum(
                torch.minimum(
                    _segment_d2(a[:, 0], a[:, 1], b[:, 0], b[:, 1], qx, qy),
                    _segment_d2(b[:, 0], b[:, 1], c[:, 0], c[:, 1], qx, qy),
                ),
                _segment_d2(c[:, 0], c[:, 1], a[:, 0], a[:, 1], qx, qy),
            )
            with torch.no_grad():
                inside_soft = (lam >= 0).all(dim=1)
            d2_ndc = d2 * (4.0 / (size * size))
            s = torch.where(inside_soft, d2_ndc, -d2_ndc) / sigma
            # log(1 - sigmoid(s)) = -softplus(s)
            acc = acc.index_add(0, pix, F.softplus(s))

    silhouette = -torch.expm1(-acc) if need_soft else coverage
    shape = (bsz, size, size)
    return RenderOutput(
        image=image.reshape(bsz, size, size, 3).permute(0, 3, 1, 2),
        silhouette=silhouette.reshape(shape),
        depth=depth.reshape(shape),
        coverage=coverage.reshape(shape),
        face_index=face_index.reshape(shape),
    )


def render_silhouette_only(mesh: DeformedMesh, cams: CameraArg, sigma: float = DEFAULT_SIGMA) -> torch.Tensor:
    return rasterize(mesh, None, cams, sigma).silhouette


def zbuffer_at_points(mesh: DeformedMesh, cams: CameraArg, points: torch.Tensor):
    """Hard z-buffer evaluated at arbitrary screen points.

    ``points`` is (B, N, 2) in pixel coordinates. Returns the depth of the
    nearest covering face (``+inf`` where nothing covers the point) and the
    face id (``-1``), both (B, N). No gradients.
    """
    with torch.no_grad():
        verts = mesh.batched().detach()
        template = mesh.template
        cams = _camera_list(cams, verts.shape[0])
        b, n = points.shape[:2]
        depth = torch.full((b * n,), math.inf, dtype=verts.dtype, device=verts.device)
        face_id = torch.full((b * n,), -1, dtype=torch.long, device=verts.device)
        if template.num_faces == 0:
            return depth.reshape(b, n), face_id.reshape(b, n)
        scene = _Scene(verts, template.faces, cams)
        face, pt = scene.point_pairs(points.to(verts.dtype))
        flat = points.reshape(-1, 2).to(verts.dtype)
        lam, inv, _, _ = scene.geometry(face, flat[pt, 0], flat[pt, 1], detach=True)
        inside = (lam >= -1e-9).all(dim=1) & (inv > 0)
        idx = torch.nonzero(inside).squeeze(1)
        win, win_pt = _zbuffer(face[idx], pt[idx], b * n, 1.0 / inv[idx])
        win = idx[win]
        depth[win_pt] = 1.0 / inv[win]
        face_id[win_pt] = torch.remainder(face[win], template.num_faces)
        return depth.reshape(b, n), face_id.reshape(b, n)
