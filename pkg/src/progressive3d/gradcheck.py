"""Finite-difference gradient checks for the renderer, the losses and the mesh ops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .losses import FeatureExtractor, perceptual_novel_view, perceptual_same_view, silhouette_iou_loss
from .mesh import DeformedMesh, apply_deformation, build_icosphere, laplacian_loss
from .render import Camera, rasterize

SUITES = ("renderer", "losses", "mesh")


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_error <= self.tolerance)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: rel err {self.rel_error:.3e} (tol {self.tolerance:.0e})"


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    a = analytic.detach().double().flatten()
    n = numeric.detach().double().flatten()
    denom = max(float(n.norm()), 1e-12)
    return float((a - n).norm()) / denom


def numeric_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-6, index=None):
    """Central differences of scalar ``f`` at ``x`` for the flat entries in ``index`` (default: all)."""
    x = x.detach().clone()
    flat = x.view(-1)
    index = range(flat.numel()) if index is None else index
    out = torch.zeros(len(index), dtype=torch.float64)
    with torch.no_grad():
        for k, i in enumerate(index):
            orig = float(flat[i])
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            out[k] = (fp - fm) / (2 * h)
    return out


def directional_check(f, x: torch.Tensor, n_dirs: int, seed: int, h: float = 1e-6):
    """Compare analytic and central-difference directional derivatives along random directions."""
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    gen = torch.Generator().manual_seed(seed)
    ana, num = [], []
    with torch.no_grad():
        for _ in range(n_dirs):
            d = torch.randn(x.shape, generator=gen, dtype=torch.float64)
            d /= d.norm()
            ana.append(float((g * d).sum()))
            num.append((float(f(x + h * d)) - float(f(x - h * d))) / (2 * h))
    return torch.tensor(ana), torch.tensor(num)


def full_check(f, x: torch.Tensor, h: float = 1e-6, index=None):
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    idx = list(range(x.numel())) if index is None else list(index)
    return g.flatten()[idx], numeric_gradient(f, x, h, idx)


def _test_scene(size: int, level: int = 1, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    template = build_icosphere(level)
    verts = template.torch_vertices(torch.float64)
    verts = verts * (1.0 + 0.1 * torch.rand(verts.shape[0], 1, generator=gen, dtype=torch.float64))
    cam = Camera(azimuth=30.0, elevation=20.0, distance=3.0, fov=45.0, image_size=size)
    return template, verts, cam, gen


def check_renderer(size: int = 16, seed: int = 0) -> list[CheckResult]:
    results = []
    template, verts, cam, gen = _test_scene(size, seed=seed)
    tex = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    w_img = torch.randn(1, 3, size, size, generator=gen, dtype=torch.float64)
    mesh = DeformedMesh(verts[None], template)

    def f_tex(t):
        return (rasterize(mesh, t, cam, need_soft=False).image * w_img).sum()

    results.append(CheckResult(f"renderer.texture[{size}px]", relative_error(*full_check(f_tex, tex)), 1e-3))

    size2 = 2 * size
    cam2 = Camera(cam.azimuth, cam.elevation, cam.distance, cam.fov, size2)
    w_sil = torch.rand(1, size2, size2, generator=gen, dtype=torch.float64)
    for sigma in (1e-4, 1e-3):

        def f_sil(v, sigma=sigma):
            return (rasterize(DeformedMesh(v[None], template), None, cam2, sigma=sigma).silhouette * w_sil).sum()

        results.append(
            CheckResult(
                f"renderer.silhouette_vertices[{size2}px, sigma={sigma:g}]",
                relative_error(*full_check(f_sil, verts, h=1e-7)),
                1e-2,
            )
        )
    return results


def check_losses(size: int = 64, seed: int = 0, n_dirs: int = 16) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    phi = FeatureExtractor().double()
    ig = torch.rand(2, 3, size, size, generator=gen, dtype=torch.float64)
    ir = torch.rand(2, 3, size, size, generator=gen, dtype=torch.float64)
    sg = (torch.rand(2, size, size, generator=gen, dtype=torch.float64) > 0.4).double()
    sr = torch.rand(2, size, size, generator=gen, dtype=torch.float64)
    out = []

    def eq1(x):
        return perceptual_novel_view(ig, x, sg, phi)

    out.append(CheckResult("losses.perceptual_novel_view.I_r", relative_error(*directional_check(eq1, ir, n_dirs, seed)), 1e-3))

    def eq2(x):
        return silhouette_iou_loss(sg, x)

    out.append(CheckResult("losses.silhouette_iou.S_r", relative_error(*full_check(eq2, sr, index=range(0, sr.numel(), 7))), 1e-3))

    def eq4_img(x):
        return perceptual_same_view(ig, x, sr, phi)

    def eq4_mask(x):
        return perceptual_same_view(ig, ir, x, phi)

    out.append(
        CheckResult("losses.perceptual_same_view.I_r", relative_error(*directional_check(eq4_img, ir, n_dirs, seed)), 1e-3)
    )
    out.append(
        CheckResult("losses.perceptual_same_view.S_r", relative_error(*directional_check(eq4_mask, sr, n_dirs, seed)), 1e-3)
    )
    return out


def check_mesh(seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)
    template = build_icosphere(2)
    offsets = 0.05 * torch.randn(template.num_vertices, 3, generator=gen, dtype=torch.float64)
    base = template.torch_vertices(torch.float64)

    def lap(o):
        return laplacian_loss(DeformedMesh((base + o)[None], template))

    deform = 0.05 * torch.randn(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    w = torch.randn(template.num_vertices, 3, generator=gen, dtype=torch.float64)

    def deform_f(d):
        return (apply_deformation(template, d).batched()[0] * w).sum()

    return [
        CheckResult("mesh.laplacian_loss", relative_error(*full_check(lap, offsets)), 1e-4),
        CheckResult("mesh.apply_deformation", relative_error(*full_check(deform_f, deform)), 1e-4),
    ]


def run_suite(name: str) -> list[CheckResult]:
    if name == "renderer":
        return check_renderer()
    if name == "losses":
        return check_losses()
    if name == "mesh":
        return check_mesh()
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
