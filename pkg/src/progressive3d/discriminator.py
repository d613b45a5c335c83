"""Multi-scale projection discriminator over UV textures.

Each scale scores patches of a candidate texture (concatenated with its
visibility mask and a learnable positional embedding). The conditioning
texture goes through a separate embedding network down to a single
vector, whose dot product with the patch features is added to the patch
logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import spectral_norm


@dataclass
class DiscriminatorConfig:
    texture_size: int = 256
    scales: tuple = (32, 16)
    channels: tuple = (64, 128, 256)
    embed_dim: int = 256
    pos_channels: int = 4
    embed_channels: tuple = (64, 128, 256)

    def __post_init__(self):
        self.scales = tuple(self.scales)
        self.channels = tuple(self.channels)
        self.embed_channels = tuple(self.embed_channels)
        if not self.scales:
            raise ValueError("at least one scale is required")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        for s in self.scales:
            if s * 2 ** len(self.channels) > self.texture_size:
                raise ValueError(
                    f"{len(self.channels)} stride-2 stages cannot produce {s}x{s} logits "
                    f"from a {self.texture_size}px texture"
                )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(**d)

    @classmethod
    def paper(cls) -> "DiscriminatorConfig":
        return cls(texture_size=512, channels=(64, 128, 256, 256), embed_dim=256, embed_channels=(64, 128, 256, 256))

    @classmethod
    def toy(cls) -> "DiscriminatorConfig":
        return cls(texture_size=64, channels=(32,), embed_dim=64, pos_channels=2, embed_channels=(16, 32, 64))


def _sn_conv(in_ch, out_ch, k, stride=1, padding=0):
    return spectral_norm(nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=padding))


class _PatchTrunk(nn.Module):
    def __init__(self, in_ch: int, channels: tuple, embed_dim: int):
        super().__init__()
        layers = []
        prev = in_ch
        for c in channels:
            layers += [_sn_conv(prev, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = c
        layers += [_sn_conv(prev, embed_dim, 3, padding=1), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*layers)
        self.logit = _sn_conv(embed_dim, 1, 1)

    def forward(self, x):
        feats = self.body(x)
        return feats, self.logit(feats)[:, 0]


class ConditionEmbedding(nn.Module):
    """Strided convs and global pooling down to one ``embed_dim`` vector."""

    def __init__(self, channels: tuple, embed_dim: int):
        super().__init__()
        layers = []
        prev = 4
        for c in channels:
            layers += [_sn_conv(prev, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = c
        self.body = nn.Sequential(*layers)
        self.out = spectral_norm(nn.Linear(prev, embed_dim))

    def forward(self, texture, visibility):
        x = torch.cat([texture, visibility[:, None]], dim=1)
        h = self.body(x).mean(dim=(2, 3))
        return self.out(h)


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        n_down = len(config.channels)
        self.input_sizes = [s * 2 ** n_down for s in config.scales]
        self.pos = nn.ParameterList(
            [nn.Parameter(0.1 * torch.randn(1, config.pos_channels, n, n)) for n in self.input_sizes]
        )
        self.trunks = nn.ModuleList(
            [_PatchTrunk(4 + config.pos_channels, config.channels, config.embed_dim) for _ in config.scales]
        )
        self.embeds = nn.ModuleList([ConditionEmbedding(config.embed_channels, config.embed_dim) for _ in config.scales])

    def _resize(self, x, n):
        size = x.shape[-1]
        if size == n:
            return x
        return F.avg_pool2d(x, size // n)

    def features(self, candidate, visibility):
        """Per-scale (features, unconditional patch logits)."""
        b, _, h, w = candidate.shape
        if visibility.shape != (b, h, w) or h != self.config.texture_size or w != h:
            raise ValueError(
                f"candidate {tuple(candidate.shape)} / visibility {tuple(visibility.shape)} "
                f"do not match texture size {self.config.texture_size}"
            )
        x = torch.cat([candidate, visibility[:, None].to(candidate.dtype)], dim=1)
        out = []
        for n, pos, trunk in zip(self.input_sizes, self.pos, self.trunks):
            xs = self._resize(x, n)
            xs = torch.cat([xs, pos.expand(b, -1, -1, -1)], dim=1)
            out.append(trunk(xs))
        return out

    def embed_condition(self, cond_texture, cond_visibility):
        """One embedding vector per scale, each (B, embed_dim)."""
        return [embed(cond_texture, cond_visibility) for embed in self.embeds]

    def score(
        self,
        candidate,
        visibility,
        cond_texture,
        cond_visibility,
        embeddings: Optional[list] = None,
    ) -> list:
        """Per-scale logit maps (B, s, s): patch logits plus the projection term."""
        if cond_texture.shape != candidate.shape:
            raise ValueError("conditioning texture must match the candidate's shape")
        if embeddings is None:
            embeddings = self.embed_condition(cond_texture, cond_visibility)
        logits = []
        for (feats, patch), e in zip(self.features(candidate, visibility), embeddings):
            logits.append(patch + torch.einsum("bc,bchw->bhw", e, feats))
        return logits

    def forward(self, candidate, visibility, cond_texture, cond_visibility):
        return self.score(candidate, visibility, cond_texture, cond_visibility)
