"""Image/silhouette metrics and the same-view / novel-view evaluation protocol.

The Frechet distance here is computed on the fixed random feature pyramid,
not on an Inception network, so its values are only comparable with other
numbers produced by this package.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import linalg
from skimage.metrics import structural_similarity

from .datagen import MultiViewSample, gt_mesh
from .losses import FeatureExtractor
from .mesh import DeformedMesh, build_icosphere
from .render import rasterize

PROTOCOLS = ("same_view", "novel_view")
PROXY_FD_NOTE = "proxy_frechet_distance uses fixed random conv features; not comparable to Inception FID"


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def metric_mse(a, b) -> float:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def metric_ssim(a, b) -> float:
    """SSIM of (3, H, W) or (H, W) images in [0, 1] with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, K1=0.01, K2=0.03)
    if a.ndim == 3:
        return float(structural_similarity(a, b, channel_axis=0, **kw))
    return float(structural_similarity(a, b, **kw))


def metric_iou(mask_a, mask_b) -> float:
    a, b = _np(mask_a) > 0.5, _np(mask_b) > 0.5
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def metric_feature_distance(a, b, phi: FeatureExtractor) -> float:
    """Channel-normalized squared feature difference, averaged over positions and layers."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.dim() == 3:
        a, b = a[None], b[None]
    with torch.no_grad():
        fa, fb = phi(a.float()), phi(b.float())
        per_layer = [(_unit_normalize(x) - _unit_normalize(y)).pow(2).sum(dim=1).mean() for x, y in zip(fa, fb)]
    return float(sum(per_layer) / len(per_layer))


def pooled_features(images, phi: FeatureExtractor, chunk: int = 64) -> np.ndarray:
    """Global-average-pooled features of every layer, concatenated: (N, sum of channels)."""
    images = torch.as_tensor(images)
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], chunk):
            feats = phi(images[i : i + chunk].float())
            out.append(torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1).double())
    return torch.cat(out).numpy()


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean)
    return float(max(d, 0.0))


def _gaussian(feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("need a non-empty (N, D) feature set")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, bias=False) if feats.shape[0] > 1 else np.zeros((feats.shape[1],) * 2)
    return mu, np.atleast_2d(cov)


def metric_proxy_fd(set_a, set_b, phi: Optional[FeatureExtractor] = None) -> float:
    """Frechet distance between Gaussians fit to two sets.

    With ``phi`` the sets are images (N, 3, H, W) and pooled features are
    used; without it they are already feature matrices (N, D).
    """
    if phi is not None:
        set_a, set_b = pooled_features(set_a, phi), pooled_features(set_b, phi)
    return frechet_distance(*_gaussian(set_a), *_gaussian(set_b))


# ----- predictors


class Predictor:
    """Maps (samples, input views) to a batched mesh and textures (B, 3, T, T)."""

    def __call__(self, samples: Sequence[MultiViewSample], views: Sequence[int]):
        raise NotImplementedError


class GeneratorPredictor(Predictor):
    def __init__(self, generator, z: Optional[torch.Tensor] = None):
        self.generator = generator
        self.z = z

    def __call__(self, samples, views):
        images = torch.stack([s.images[v] for s, v in zip(samples, views)])
        z = self.z
        if z is None:
            z = torch.zeros(len(samples), self.generator.config.latent_dim)
        elif z.dim() == 1:
            z = z[None].expand(len(samples), -1)
        with torch.no_grad():
            pred = self.generator(images, z)
        return pred.mesh, pred.texture


class OraclePredictor(Predictor):
    """Ground-truth geometry and texture, ignoring the input image."""

    def __call__(self, samples, views):
        levels = {s.gt_level for s in samples}
        if len(levels) != 1:
            raise ValueError("oracle batch mixes template levels")
        template = build_icosphere(levels.pop())
        verts = torch.stack([gt_mesh(s, template).batched()[0] for s in samples])
        tex = torch.stack([s.gt_texture for s in samples])
        return DeformedMesh(verts, template), tex


class SpherePredictor(Predictor):
    """Undeformed template with the input view's mean foreground colour as texture."""

    def __init__(self, level: int = 3, texture_size: int = 64):
        self.template = build_icosphere(level)
        self.texture_size = texture_size

    def __call__(self, samples, views):
        t = self.texture_size
        verts = self.template.torch_vertices()[None].expand(len(samples), -1, -1)
        cols = []
        for s, v in zip(samples, views):
            m = s.masks[v]
            c = (s.images[v] * m).sum(dim=(1, 2)) / m.sum().clamp_min(1.0)
            cols.append(c[:, None, None].expand(3, t, t))
        return DeformedMesh(verts, self.template), torch.stack(cols)


def checkpoint_predictor(path) -> GeneratorPredictor:
    from .trainer import generator_from_checkpoint

    g, _ = generator_from_checkpoint(path)
    return GeneratorPredictor(g)


# ----- protocol


@dataclass
class EvalReport:
    same_view: dict
    novel_view: dict
    per_object: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    note: str = PROXY_FD_NOTE

    def __post_init__(self):
        for proto in (self.same_view, self.novel_view):
            if proto.get("ssim") is not None and not (-1.0 - 1e-9 <= proto["ssim"] <= 1.0 + 1e-9):
                raise ValueError("ssim out of range")
            if proto.get("iou") is not None and not (0.0 <= proto["iou"] <= 1.0):
                raise ValueError("iou out of range")
            if proto.get("mse") is not None and proto["mse"] < 0:
                raise ValueError("negative mse")

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path) as f:
            return cls(**json.load(f))


def novel_view_of(view: int, n_views: int) -> int:
    return (view + 1) % n_views


def _score_views(rendered, silhouettes, targets, target_masks, phi) -> list[dict]:
    """Per-item metrics. Same code path for both protocols."""
    rows = []
    for img, sil, tgt, tmask in zip(rendered, silhouettes, targets, target_masks):
        rows.append(
            {
                "mse": metric_mse(img, tgt),
                "ssim": metric_ssim(img, tgt),
                "iou": metric_iou(sil, tmask),
                "feature_distance": metric_feature_distance(img, tgt, phi),
            }
        )
    return rows


def evaluate(
    predictor: Callable,
    samples: Sequence[MultiViewSample],
    phi: Optional[FeatureExtractor] = None,
    input_views: Optional[Sequence[int]] = None,
    batch_size: int = 16,
    config: Optional[dict] = None,
) -> EvalReport:
    """Predict from each input view and score renders at that view and at the next azimuth.

    ``input_views`` defaults to every view of every object.
    """
    phi = phi or FeatureExtractor()
    jobs = []
    for i, s in enumerate(samples):
        views = range(s.n_views) if input_views is None else input_views
        for v in views:
            if s.n_views < 2:
                raise ValueError(f"{s.object_id}: novel-view evaluation needs at least two views")
            jobs.append((i, int(v), novel_view_of(int(v), s.n_views)))

    per_object = []
    collected = {p: {"render": [], "target": []} for p in PROTOCOLS}
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        batch_samples = [samples[i] for i, _, _ in chunk]
        v1 = [v for _, v, _ in chunk]
        v2 = [w for _, _, w in chunk]
        mesh, texture = predictor(batch_samples, v1)
        with torch.no_grad():
            results = {}
            for proto, views in (("same_view", v1), ("novel_view", v2)):
                cams = [s.cameras[v] for s, v in zip(batch_samples, views)]
                out = rasterize(mesh, texture, cams, need_soft=False)
                rendered = out.image.float().clamp(0, 1)
                # only the target view's imagery enters the metrics
                targets = torch.stack([s.images[v] for s, v in zip(batch_samples, views)])
                tmasks = torch.stack([s.masks[v] for s, v in zip(batch_samples, views)])
                results[proto] = _score_views(rendered, out.coverage, targets, tmasks, phi)
                collected[proto]["render"].append(rendered)
                collected[proto]["target"].append(targets)
        for k, (i, a, b) in enumerate(chunk):
            per_object.append(
                {
                    "object_id": samples[i].object_id,
                    "input_view": a,
                    "novel_view_index": b,
                    "same_view": results["same_view"][k],
                    "novel_view": results["novel_view"][k],
                }
            )

    summary = {}
    for proto in PROTOCOLS:
        agg = {k: float(np.mean([r[proto][k] for r in per_object])) for k in ("mse", "ssim", "iou", "feature_distance")}
        rend = torch.cat(collected[proto]["render"])
        tgt = torch.cat(collected[proto]["target"])
        agg["proxy_frechet_distance"] = metric_proxy_fd(rend, tgt, phi)
        summary[proto] = agg
    return EvalReport(
        same_view=summary["same_view"],
        novel_view=summary["novel_view"],
        per_object=per_object,
        config=dict(config or {}, n_objects=len(samples), n_evaluations=len(jobs), phi=getattr(phi, "source", None)),
    )


def evaluate_checkpoint(checkpoint, samples, out=None, **kw) -> EvalReport:
    report = evaluate(checkpoint_predictor(checkpoint), samples, config={"checkpoint": str(checkpoint)}, **kw)
    if out is not None:
        report.write(out)
    return report
