"""Image, depth and mesh file helpers."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .mesh import TemplateMesh, template_from_arrays
from .render import Camera


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def save_png(path, image) -> None:
    """Write a (3, H, W) / (H, W, 3) RGB or (H, W) gray array in [0, 1] as 8-bit PNG."""
    arr = _to_numpy(image).astype(np.float64)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    arr = np.clip(np.round(np.nan_to_num(arr) * 255.0), 0, 255).astype(np.uint8)
    _atomic_write(path, lambda f: Image.fromarray(arr).save(f, format="PNG"))


def load_png(path, mode: str = "RGB") -> torch.Tensor:
    """Read a PNG as float32 in [0, 1]: (3, H, W) for RGB, (H, W) for ``mode='L'``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    t = torch.from_numpy(arr.copy())
    return t.permute(2, 0, 1).contiguous() if t.dim() == 3 else t


def _atomic_write(path, writer) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        writer(f)
    os.replace(tmp, path)


def write_pfm(path, array) -> None:
    """Single-channel little-endian PFM; rows stored bottom-to-top per the format."""
    arr = _to_numpy(array).astype("<f4")
    if arr.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = arr.shape

    def writer(f):
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())

    _atomic_write(path, writer)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: only single-channel PFM is supported")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h)
    return data.reshape(h, w)[::-1].astype(np.float32)


def write_obj(path, vertices, template: TemplateMesh) -> None:
    """Wavefront OBJ with ``v``, ``vt`` and ``f v/vt`` records (1-based).

    ``vt`` stores ``(u, 1 - v)`` so texture row 0 is the top of the image.
    """
    verts = _to_numpy(vertices).reshape(-1, 3)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in verts]
    lines += [f"vt {u:.9g} {1.0 - v:.9g}" for u, v in template.uv]
    for (a, b, c), (ta, tb, tc) in zip(template.faces + 1, template.faces_uv + 1):
        lines.append(f"f {a}/{ta} {b}/{tb} {c}/{tc}")
    data = ("\n".join(lines) + "\n").encode("ascii")
    _atomic_write(path, lambda f: f.write(data))


def read_obj(path):
    """Read a triangle OBJ written by :func:`write_obj` (or any v/vt/f file).

    Returns ``(vertices (V, 3) float64, template)`` where the template wraps
    the file's topology and UVs.
    """
    verts, uvs, faces, faces_uv = [], [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                u, v = float(parts[1]), float(parts[2])
                uvs.append([u, 1.0 - v])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}: only triangle faces are supported")
                idx = [p.split("/") for p in parts[1:]]
                faces.append([int(i[0]) - 1 for i in idx])
                if all(len(i) > 1 and i[1] for i in idx):
                    faces_uv.append([int(i[1]) - 1 for i in idx])
    verts = np.asarray(verts, dtype=np.float64)
    if not uvs or len(faces_uv) != len(faces):
        raise ValueError(f"{path}: faces need texture coordinates (f v/vt)")
    template = template_from_arrays(verts, faces, uvs, faces_uv)
    return verts, template


def load_camera(path, image_size: int | None = None) -> Camera:
    with open(path) as f:
        d = json.load(f)
    return Camera.from_dict(d, image_size=image_size)
