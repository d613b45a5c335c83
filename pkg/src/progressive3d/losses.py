"""Training objectives.

``FeatureExtractor`` is a frozen stride-2 conv pyramid used wherever a
perceptual comparison is needed. By default its weights are drawn from a
fixed seed; trained weights can be loaded from a state-dict file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .mesh import DeformedMesh, laplacian_loss

IOU_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_pn: float = 1.0
    lambda_s: float = 1.0
    lambda_lap: float = 0.5
    lambda_ps: float = 1.0
    lambda_adv: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            v = float(v)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"{k} must be finite and non-negative, got {v}")
            setattr(self, k, v)

    def to_dict(self) -> dict:
        return asdict(self)


class FeatureExtractor(nn.Module):
    """Frozen conv pyramid returning the activations of the layers in ``layers`` (1-based)."""

    def __init__(
        self,
        channels: Sequence[int] = (16, 32, 64, 96, 128),
        layers: Sequence[int] = (1, 2, 3),
        seed: int = 0,
        weights_path: Optional[str] = None,
    ):
        super().__init__()
        self.channels = tuple(channels)
        self.layers = tuple(sorted(layers))
        if not self.layers or self.layers[0] < 1 or self.layers[-1] > len(self.channels):
            raise ValueError(f"layers {layers} out of range for {len(self.channels)} conv layers")
        convs = []
        prev = 3
        for c in self.channels:
            convs.append(nn.Conv2d(prev, c, 3, stride=2, padding=1))
            prev = c
        self.convs = nn.ModuleList(convs)

        if weights_path is not None:
            self.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
            self.source = f"file:{weights_path}"
        else:
            gen = torch.Generator().manual_seed(seed)
            with torch.no_grad():
                for conv in self.convs:
                    fan_in = conv.in_channels * 9
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    conv.bias.zero_()
            self.source = f"random:{seed}"
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list:
        feats = []
        last = self.layers[-1]
        for i, conv in enumerate(self.convs, start=1):
            x = F.relu(conv(x.to(conv.weight.dtype)))
            if i in self.layers:
                feats.append(x)
            if i == last:
                break
        return feats


def feature_l2(phi: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum over layers of the squared feature difference, averaged over batch, channels and positions."""
    fa = phi(a)
    fb = phi(b)
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb))


def perceptual_novel_view(I_g_v2, I_r_v2, S_g_v2, phi: FeatureExtractor) -> torch.Tensor:
    """Target-view perceptual loss with both images masked by the ground-truth silhouette."""
    m = S_g_v2[:, None]
    return feature_l2(phi, I_g_v2 * m, I_r_v2 * m)


def perceptual_same_view(I_g_v1, I_r_v1, S_r_v1, phi: FeatureExtractor) -> torch.Tensor:
    """Input-view perceptual loss masked by the *rendered* silhouette; gradients flow through it."""
    m = S_r_v1[:, None]
    return feature_l2(phi, I_g_v1 * m, I_r_v1 * m)


def silhouette_iou_loss(S_g, S_r) -> torch.Tensor:
    """1 - soft IoU, per item then averaged over the batch."""
    if S_g.dim() == 2:
        S_g, S_r = S_g[None], S_r[None]
    inter = (S_g * S_r).flatten(1).sum(1)
    union = (S_g + S_r - S_g * S_r).flatten(1).sum(1)
    return (1.0 - inter / (union + IOU_EPS)).mean()


def stage1_terms(batch: dict, render_v2, mesh: DeformedMesh, phi) -> dict:
    return {
        "p_nv": perceptual_novel_view(batch["image_v2"], render_v2.image, batch["mask_v2"], phi),
        "sil": silhouette_iou_loss(batch["mask_v2"], render_v2.silhouette),
        "lap": laplacian_loss(mesh),
    }


def combine_stage1(terms: dict, w: LossWeights) -> torch.Tensor:
    return w.lambda_pn * terms["p_nv"] + w.lambda_s * terms["sil"] + w.lambda_lap * terms["lap"]


def stage1_loss(batch: dict, prediction, renders: dict, weights: LossWeights, phi) -> torch.Tensor:
    """Novel-view perceptual + novel-view silhouette IoU + Laplacian.

    ``batch`` holds ``image_v2``/``mask_v2`` (and ``image_v1`` for later
    stages); ``renders`` maps ``"v2"`` (and ``"v1"``) to RenderOutput.
    """
    return combine_stage1(stage1_terms(batch, renders["v2"], prediction.mesh, phi), weights)


def stage2_loss(batch: dict, prediction, renders: dict, weights: LossWeights, phi) -> torch.Tensor:
    """Stage 1 plus the input-view perceptual term; no input-view silhouette term."""
    r1 = renders["v1"]
    p_sv = perceptual_same_view(batch["image_v1"], r1.image, r1.silhouette, phi)
    return stage1_loss(batch, prediction, renders, weights, phi) + weights.lambda_ps * p_sv


def hinge_d_loss(real_logits: list, fake_logits: list) -> torch.Tensor:
    """Hinge loss averaged over scales."""
    per_scale = [F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean() for r, f in zip(real_logits, fake_logits)]
    return sum(per_scale) / len(per_scale)


def discriminator_accuracy(real_logits: list, fake_logits: list, visibility: torch.Tensor) -> torch.Tensor:
    """Per-sample real/fake accuracy, averaged over scales.

    Each logit map is reduced to one score per sample, weighting patches by
    the visible fraction of their footprint. Fully hidden patches see zeros
    for both real and fake, so counting them would pin accuracy near 0.5.
    """
    vis = visibility[:, None].to(real_logits[0].dtype)
    accs = []
    for r, f in zip(real_logits, fake_logits):
        w = F.adaptive_avg_pool2d(vis, r.shape[-2:])[:, 0]
        w = torch.where(w.sum(dim=(1, 2), keepdim=True) > 0, w, torch.ones_like(w))
        w = w / w.sum(dim=(1, 2), keepdim=True)
        real_ok = ((w * r).sum(dim=(1, 2)) > 0).to(r.dtype)
        fake_ok = ((w * f).sum(dim=(1, 2)) < 0).to(r.dtype)
        accs.append(0.5 * (real_ok + fake_ok).mean())
    return sum(accs) / len(accs)


def generator_adv_loss(fake_logits: list) -> torch.Tensor:
    """Non-saturating generator term ``softplus(-D(fake))``, averaged over scales."""
    return sum(F.softplus(-f).mean() for f in fake_logits) / len(fake_logits)


def stage3_losses(
    batch: dict,
    prediction,
    renders: dict,
    weights: LossWeights,
    phi,
    fake_logits_for_g: list,
    real_logits: Optional[list] = None,
    fake_logits_for_d: Optional[list] = None,
):
    """Generator loss (stage 2 + adversarial) and, when logits are given, the hinge D loss."""
    g = stage2_loss(batch, prediction, renders, weights, phi) + weights.lambda_adv * generator_adv_loss(
        fake_logits_for_g
    )
    d = None
    if real_logits is not None and fake_logits_for_d is not None:
        d = hinge_d_loss(real_logits, fake_logits_for_d)
    return g, d


def sameview_ablation_loss(I_g_v1, I_r_v1, S_g_v1, S_r_v1, weights: LossWeights, phi, mesh: DeformedMesh):
    """Single-view baseline: perceptual and IoU on the input view with ground-truth masks."""
    p = perceptual_novel_view(I_g_v1, I_r_v1, S_g_v1, phi)
    s = silhouette_iou_loss(S_g_v1, S_r_v1)
    return weights.lambda_pn * p + weights.lambda_s * s + weights.lambda_lap * laplacian_loss(mesh)
