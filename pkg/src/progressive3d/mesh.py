"""Sphere template, UV parameterization and deformation utilities.

The template is an icosphere with an equirectangular UV layout. Longitude
is measured with ``atan2(x, z)`` so that ``u = 0.5`` faces +z and the
mirror plane ``x = 0`` maps to the vertical centre line of UV space. That
is what lets the generator predict half maps and mirror them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

MAX_SUBDIVISION = 6

_T = (1.0 + 5.0 ** 0.5) / 2.0
_ICO_VERTICES = np.array(
    [
        [-1, _T, 0], [1, _T, 0], [-1, -_T, 0], [1, -_T, 0],
        [0, -1, _T], [0, 1, _T], [0, -1, -_T], [0, 1, -_T],
        [_T, 0, -1], [_T, 0, 1], [-_T, 0, -1], [-_T, 0, 1],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    """Fixed-topology sphere mesh.

    ``uv``/``faces_uv`` carry the texture layout, where seam and pole
    corners are duplicated. ``vertex_uv`` holds one canonical UV per
    geometry vertex and is where the deformation map is sampled.
    Adjacency is stored in CSR form (``neighbor_offsets``, ``neighbors``).
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    faces_uv: np.ndarray
    vertex_uv: np.ndarray
    neighbors: np.ndarray
    neighbor_offsets: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def adjacency(self) -> list[np.ndarray]:
        o = self.neighbor_offsets
        return [self.neighbors[o[i]:o[i + 1]] for i in range(self.num_vertices)]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with ``e[:, 0] < e[:, 1]``."""
        return _unique_edges(self.faces)

    def torch_vertices(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.vertices, dtype=dtype, device=device)


@dataclass
class DeformedMesh:
    """Template topology with (possibly batched) deformed vertex positions."""

    vertices: torch.Tensor  # (B, V, 3) or (V, 3)
    template: TemplateMesh

    @property
    def faces(self) -> np.ndarray:
        return self.template.faces

    def batched(self) -> torch.Tensor:
        return self.vertices if self.vertices.dim() == 3 else self.vertices[None]

    def detach(self) -> "DeformedMesh":
        return DeformedMesh(self.vertices.detach(), self.template)

    def __getitem__(self, i) -> "DeformedMesh":
        return DeformedMesh(self.batched()[i], self.template)


def _unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _subdivide(vertices: np.ndarray, faces: np.ndarray):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    edges, inverse = np.unique(e, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mids = vertices[edges[:, 0]] + vertices[edges[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    n_f = len(faces)
    ab = len(vertices) + inverse[:n_f]
    bc = len(vertices) + inverse[n_f:2 * n_f]
    ca = len(vertices) + inverse[2 * n_f:]
    a, b, c = faces.T
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], 1),
            np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1),
            np.stack([ab, bc, ca], 1),
        ]
    )
    return np.concatenate([vertices, mids]), new_faces


def spherical_uv(points: np.ndarray) -> np.ndarray:
    """Equirectangular UV of unit-sphere points; poles get ``u = 0.5``."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    u = 0.5 + np.arctan2(x, z) / (2 * np.pi)
    v = np.arccos(np.clip(y, -1.0, 1.0)) / np.pi
    pole = (np.abs(x) < 1e-12) & (np.abs(z) < 1e-12)
    u = np.where(pole, 0.5, u)
    u = np.where(u >= 1.0, u - 1.0, u)
    return np.stack([u, v], axis=1)


def _face_uvs(vertices: np.ndarray, faces: np.ndarray):
    """Per-corner UVs with seam unwrapping and pole fix-up, deduplicated."""
    vuv = spherical_uv(vertices)
    corner = vuv[faces].copy()  # (F, 3, 2)
    pole = (np.abs(vertices[:, 0]) < 1e-12) & (np.abs(vertices[:, 2]) < 1e-12)
    corner_pole = pole[faces]

    # faces straddling the back seam: lift the small-u corners past 1
    u = np.where(corner_pole, np.nan, corner[..., 0])
    span = np.nanmax(u, axis=1) - np.nanmin(u, axis=1)
    seam = span > 0.5
    lift = seam[:, None] & (corner[..., 0] < 0.5) & ~corner_pole
    corner[..., 0] = np.where(lift, corner[..., 0] + 1.0, corner[..., 0])

    if corner_pole.any():
        u = np.where(corner_pole, np.nan, corner[..., 0])
        mean_u = np.nanmean(u, axis=1)
        corner[..., 0] = np.where(corner_pole, mean_u[:, None], corner[..., 0])

    key = np.concatenate(
        [faces.reshape(-1, 1).astype(np.float64), np.round(corner.reshape(-1, 2), 12)], axis=1
    )
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    return uniq[:, 1:], inverse.reshape(-1, 3), vuv


def _csr_adjacency(faces: np.ndarray, n_vertices: int):
    edges = _unique_edges(faces)
    directed = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((directed[:, 1], directed[:, 0]))
    directed = directed[order]
    counts = np.bincount(directed[:, 0], minlength=n_vertices)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return directed[:, 1].copy(), offsets


def template_from_arrays(vertices, faces, uv, faces_uv) -> TemplateMesh:
    """Wrap arbitrary mesh arrays (e.g. loaded from OBJ) as a TemplateMesh.

    The canonical per-vertex UV is the first corner UV seen for that vertex.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    faces_uv = np.asarray(faces_uv, dtype=np.int64).reshape(-1, 3)
    vertex_uv = np.zeros((len(vertices), 2))
    flat_v = faces.reshape(-1)[::-1]
    flat_t = faces_uv.reshape(-1)[::-1]
    vertex_uv[flat_v] = np.mod(uv[flat_t], [1.0, np.inf])
    neighbors, offsets = _csr_adjacency(faces, len(vertices))
    return TemplateMesh(
        vertices=vertices,
        faces=faces,
        uv=uv,
        faces_uv=faces_uv,
        vertex_uv=vertex_uv,
        neighbors=neighbors,
        neighbor_offsets=offsets,
    )


def build_icosphere(subdivision_level: int) -> TemplateMesh:
    """Unit icosphere with equirectangular UVs.

    Level 0 is the icosahedron (12 vertices, 20 faces); each level adds a
    vertex per edge and quadruples the faces.
    """
    level = int(subdivision_level)
    if level < 0:
        raise ValueError(f"subdivision level must be >= 0, got {level}")
    if level > MAX_SUBDIVISION:
        raise ValueError(f"subdivision level {level} exceeds the limit of {MAX_SUBDIVISION}")

    vertices = _ICO_VERTICES / np.linalg.norm(_ICO_VERTICES, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    for _ in range(level):
        vertices, faces = _subdivide(vertices, faces)

    uv, faces_uv, vertex_uv = _face_uvs(vertices, faces)
    neighbors, offsets = _csr_adjacency(faces, len(vertices))
    return TemplateMesh(
        vertices=vertices,
        faces=faces,
        uv=uv,
        faces_uv=faces_uv,
        vertex_uv=vertex_uv,
        neighbors=neighbors,
        neighbor_offsets=offsets,
    )


def sample_deformation(deformation: torch.Tensor, uv) -> torch.Tensor:
    """Bilinearly sample a deformation map at UV coordinates.

    ``deformation`` is (B, 3, H, W) or (3, H, W); ``uv`` is (N, 2) with
    ``u`` along columns and ``v`` along rows. Texel centres sit at
    ``((j + 0.5) / W, (i + 0.5) / H)``. ``u`` is periodic (longitude), so
    the first and last columns blend across the seam; ``v`` is clamped to
    the border rows. Returns (B, N, 3) or (N, 3).
    """
    squeeze = deformation.dim() == 3
    grid_map = deformation[None] if squeeze else deformation
    w = grid_map.shape[-1]
    padded = torch.cat([grid_map[..., -1:], grid_map, grid_map[..., :1]], dim=-1)
    uv = torch.as_tensor(uv, dtype=grid_map.dtype, device=grid_map.device)
    u = torch.remainder(uv[:, 0], 1.0)
    u = (u * w + 1.0) / (w + 2.0)
    v = uv[:, 1].clamp(0.0, 1.0)
    grid = (torch.stack([u, v], dim=-1) * 2.0 - 1.0)[None, None].expand(grid_map.shape[0], 1, -1, 2)
    out = F.grid_sample(padded, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = out[:, :, 0].transpose(1, 2)
    return out[0] if squeeze else out


def apply_deformation(template: TemplateMesh, deformation: torch.Tensor) -> DeformedMesh:
    """Offset every template vertex by the deformation sampled at its UV."""
    if not torch.isfinite(deformation).all():
        raise ValueError("deformation map contains non-finite values")
    base = template.torch_vertices(deformation.dtype, deformation.device)
    offsets = sample_deformation(deformation, template.vertex_uv)
    return DeformedMesh(base + offsets, template)


def _directed_edges(template: TemplateMesh, device) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    key = ("laplacian", str(device))
    if key not in template._cache:
        counts = np.diff(template.neighbor_offsets)
        src = np.repeat(np.arange(template.num_vertices), counts)
        template._cache[key] = (
            torch.as_tensor(src, device=device),
            torch.as_tensor(template.neighbors, device=device),
            torch.as_tensor(counts, device=device),
        )
    return template._cache[key]


def uniform_laplacian(offsets: torch.Tensor, template: TemplateMesh) -> torch.Tensor:
    """``x_i - mean_{j in N(i)} x_j`` for per-vertex values shaped (..., V, C)."""
    src, dst, deg = _directed_edges(template, offsets.device)
    summed = torch.zeros_like(offsets).index_add(-2, src, offsets.index_select(-2, dst))
    return offsets - summed / deg.to(offsets.dtype)[:, None]


def laplacian_loss(mesh: DeformedMesh, template: Optional[TemplateMesh] = None) -> torch.Tensor:
    """Squared norm of the uniform Laplacian of the vertex offsets.

    Offsets are taken relative to the template so the undeformed sphere
    costs nothing. Summed over vertices and averaged over the batch, the
    usual convention for mesh-reconstruction Laplacian terms; with a
    per-vertex mean the default weight is far too weak to stop folds.
    """
    template = template or mesh.template
    verts = mesh.batched()
    offsets = verts - template.torch_vertices(verts.dtype, verts.device)
    lap = uniform_laplacian(offsets, template)
    return lap.pow(2).sum(dim=(1, 2)).mean()


def apply_symmetry(half_map: torch.Tensor) -> torch.Tensor:
    """Concatenate a half map with its mirror along the last (column) axis."""
    return torch.cat([half_map, torch.flip(half_map, dims=[-1])], dim=-1)


def apply_deformation_symmetry(half_map: torch.Tensor) -> torch.Tensor:
    """Mirror a (…, 3, H, W/2) offset map and negate x on the mirrored half.

    Mirroring columns maps longitude ``phi`` to ``-phi``; a shape that is
    symmetric about ``x = 0`` also needs its x offsets flipped there.
    """
    mirrored = torch.flip(half_map, dims=[-1])
    sign = torch.tensor([-1.0, 1.0, 1.0], dtype=half_map.dtype, device=half_map.device)
    mirrored = mirrored * sign.view(3, 1, 1)
    return torch.cat([half_map, mirrored], dim=-1)


def face_normals(vertices: torch.Tensor, faces: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """Unnormalised outward normals for (..., V, 3) vertices."""
    f = torch.as_tensor(faces, device=vertices.device)
    v0 = vertices[..., f[:, 0], :]
    v1 = vertices[..., f[:, 1], :]
    v2 = vertices[..., f[:, 2], :]
    return torch.cross(v1 - v0, v2 - v0, dim=-1)
