"""Encoder-decoder generator predicting a UV texture and a UV deformation map."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .mesh import DeformedMesh, TemplateMesh, apply_deformation, apply_deformation_symmetry, apply_symmetry

# spatial size of the decoder input (rows x half-columns) and of the shared decoder output
_START = (8, 4)
_SHARED_OUT = 32


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class GeneratorConfig:
    image_size: int = 128
    encoder_channels: tuple = (128, 256, 256, 128, 128)
    shared_decoder_channels: tuple = (512, 256)
    texture_branch_channels: tuple = (256, 128, 128)
    post_symmetry_channels: int = 64
    mesh_branch_channels: tuple = (64,)
    texture_size: int = 256
    deform_size: int = 32
    latent_dim: int = 64
    style_dim: int = 256
    channel_scale: str = "1/2"

    def __post_init__(self):
        for name in ("encoder_channels", "shared_decoder_channels", "texture_branch_channels", "mesh_branch_channels"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must be non-empty")
            setattr(self, name, value)
        for name in ("image_size", "texture_size", "deform_size"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.image_size != 4 * 2 ** len(self.encoder_channels):
            raise ValueError(
                f"{len(self.encoder_channels)} stride-2 blocks take {self.image_size}px to "
                f"{self.image_size // 2 ** len(self.encoder_channels)}px, expected 4px"
            )
        if len(self.shared_decoder_channels) != 2:
            raise ValueError("the shared decoder has exactly two blocks")
        if self.texture_size != _SHARED_OUT * 2 ** len(self.texture_branch_channels):
            raise ValueError(
                f"texture_size {self.texture_size} needs log2({self.texture_size}/{_SHARED_OUT}) texture blocks"
            )
        if self.deform_size != _SHARED_OUT:
            raise ValueError(f"deform_size is fixed at {_SHARED_OUT} by the shared decoder")

    @property
    def scale(self) -> Fraction:
        return Fraction(self.channel_scale)

    def ch(self, c: int) -> int:
        return max(1, int(c * self.scale))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)

    @classmethod
    def paper(cls) -> "GeneratorConfig":
        return cls(
            image_size=512,
            encoder_channels=(64, 128, 256, 256, 256, 128, 128),
            shared_decoder_channels=(512, 256),
            texture_branch_channels=(256, 256, 128, 128),
            post_symmetry_channels=64,
            mesh_branch_channels=(64,),
            texture_size=512,
            latent_dim=64,
            style_dim=256,
            channel_scale="1",
        )

    @classmethod
    def desk(cls) -> "GeneratorConfig":
        return cls()

    @classmethod
    def toy(cls) -> "GeneratorConfig":
        return cls(
            image_size=64,
            encoder_channels=(32, 64, 64, 64),
            shared_decoder_channels=(64, 64),
            texture_branch_channels=(32,),
            post_symmetry_channels=32,
            mesh_branch_channels=(32,),
            texture_size=64,
            latent_dim=8,
            style_dim=64,
            channel_scale="1",
        )


class AdaptiveNorm(nn.Module):
    """Instance norm whose per-channel scale and shift are regressed from a style vector."""

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.normal_(self.affine.weight, std=0.02)
        with torch.no_grad():
            self.affine.bias[:channels].fill_(1.0)
            self.affine.bias[channels:].zero_()

    def forward(self, x, style):
        gamma, beta = self.affine(style).chunk(2, dim=1)
        return self.norm(x) * gamma[:, :, None, None] + beta[:, :, None, None]


class DecoderBlock(nn.Module):
    """Two conv -> adaptive norm -> leaky ReLU layers with a residual projection."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = AdaptiveNorm(out_ch, style_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = AdaptiveNorm(out_ch, style_dim)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.upsample = upsample

    def forward(self, x, style):
        h = F.leaky_relu(self.norm1(self.conv1(x), style), 0.2)
        h = F.leaky_relu(self.norm2(self.conv2(h), style), 0.2)
        out = h + self.skip(x)
        if self.upsample:
            out = F.interpolate(out, scale_factor=2, mode="bilinear", align_corners=False)
        return out


@dataclass
class Prediction:
    texture: torch.Tensor  # (B, 3, T, T) in [0, 1]
    deformation: torch.Tensor  # (B, 3, D, D)
    mesh: DeformedMesh


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig, template: TemplateMesh):
        super().__init__()
        self.config = config
        self.template = template
        ch = config.ch

        enc = []
        prev = 3
        for c in config.encoder_channels:
            enc += [nn.Conv2d(prev, ch(c), 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = ch(c)
        self.encoder = nn.Sequential(*enc)
        self.bottleneck_channels = prev

        flat = prev * 4 * 4
        c0 = ch(config.shared_decoder_channels[0])
        self.fc = nn.Linear(flat, c0 * _START[0] * _START[1])
        self.style = nn.Linear(flat + config.latent_dim, config.style_dim)

        self.shared = nn.ModuleList()
        prev = c0
        for c in config.shared_decoder_channels:
            self.shared.append(DecoderBlock(prev, ch(c), config.style_dim, upsample=True))
            prev = ch(c)
        shared_out = prev

        self.mesh_blocks = nn.ModuleList()
        for c in config.mesh_branch_channels:
            self.mesh_blocks.append(DecoderBlock(prev, ch(c), config.style_dim, upsample=False))
            prev = ch(c)
        self.mesh_head = nn.Conv2d(prev, 3, 3, padding=1)
        nn.init.normal_(self.mesh_head.weight, std=1e-3)
        nn.init.zeros_(self.mesh_head.bias)

        prev = shared_out
        self.texture_blocks = nn.ModuleList()
        for c in config.texture_branch_channels:
            self.texture_blocks.append(DecoderBlock(prev, ch(c), config.style_dim, upsample=True))
            prev = ch(c)
        self.post_symmetry = DecoderBlock(prev, ch(config.post_symmetry_channels), config.style_dim, upsample=False)
        self.texture_head = nn.Conv2d(ch(config.post_symmetry_channels), 3, 3, padding=1)

    def sample_latent(self, batch: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return torch.randn(batch, self.config.latent_dim, generator=generator)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        size = self.config.image_size
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-2:] != (size, size):
            raise ValueError(f"expected images of shape (B, 3, {size}, {size}), got {tuple(image.shape)}")
        return self.encoder(image)

    def decode(self, bottleneck: torch.Tensor, z: torch.Tensor) -> Prediction:
        b = bottleneck.shape[0]
        if z.shape != (b, self.config.latent_dim):
            raise ValueError(f"latent must be ({b}, {self.config.latent_dim}), got {tuple(z.shape)}")
        flat = bottleneck.flatten(1)
        style = self.style(torch.cat([flat, z], dim=1))
        x = self.fc(flat).view(b, -1, *_START)
        for block in self.shared:
            x = block(x, style)

        m = x
        for block in self.mesh_blocks:
            m = block(m, style)
        deformation = apply_deformation_symmetry(self.mesh_head(m))

        t = x
        for block in self.texture_blocks:
            t = block(t, style)
        t = apply_symmetry(t)
        t = self.post_symmetry(t, style)
        texture = torch.sigmoid(self.texture_head(t))

        for name, t_ in (("texture", texture), ("deformation", deformation)):
            if not torch.isfinite(t_).all():
                raise FloatingPointError(f"generator produced non-finite {name} values")
        mesh = apply_deformation(self.template, deformation)
        return Prediction(texture=texture, deformation=deformation, mesh=mesh)

    def forward(self, image: torch.Tensor, z: Optional[torch.Tensor] = None) -> Prediction:
        if z is None:
            z = torch.zeros(image.shape[0], self.config.latent_dim, dtype=image.dtype, device=image.device)
        return self.decode(self.encode(image), z)
