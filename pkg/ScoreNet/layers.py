"""Building blocks of the noise-conditional encoder-decoder."""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def num_groups(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` not above ``min(max_groups, channels)``."""
    for groups in range(min(max_groups, channels), 0, -1):
        if channels % groups == 0:
            return groups
    return 1


def make_norm(channels: int, kind: str) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(num_groups(channels), channels, eps=1e-6)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"Unknown normalization '{kind}'")


class GaussianFourierProjection(nn.Module):
    """Random Fourier features of a scalar; frequencies are a frozen buffer."""

    def __init__(self, embedding_size: int, scale: float, generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        frequencies = torch.randn(embedding_size, generator=generator) * scale
        self.register_buffer("frequencies", frequencies)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        proj = u[:, None] * self.frequencies[None, :].to(u.dtype) * (2.0 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with an additive time embedding between them."""

    def __init__(self, in_channels: int, out_channels: int, temb_dim: Optional[int], norm: str) -> None:
        super().__init__()
        self.norm1 = make_norm(in_channels, norm)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_channels) if temb_dim else None
        self.norm2 = make_norm(out_channels, norm)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return (self.skip(x) + h) / math.sqrt(2.0)


def downsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.avg_pool2d(x, factor) if factor > 1 else x


def upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="nearest") if factor > 1 else x
