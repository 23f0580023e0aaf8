"""Small convolutional trunk with a feature pyramid on top.

Produces P2..P5 at strides 4, 8, 16, 32 with 256 channels each.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputSizeError

PYRAMID_CHANNELS = 256
PYRAMID_STRIDES = (4, 8, 16, 32)


def _conv(in_ch, out_ch, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, out_ch // 4), out_ch),
        nn.ReLU(inplace=True),
    )


class Trunk(nn.Module):
    """Four stages (32, 64, 128, 256 channels) of two 3x3 conv blocks.

    A stride-2 stem brings the input to half resolution; the first conv of
    every stage downsamples by 2, so stage outputs sit at strides 4..32.
    """

    def __init__(self, channels=(32, 64, 128, 256)):
        super().__init__()
        self.stem = _conv(3, channels[0], stride=2)
        stages = []
        in_ch = channels[0]
        for ch in channels:
            stages.append(nn.Sequential(_conv(in_ch, ch, stride=2), _conv(ch, ch)))
            in_ch = ch
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(channels)

    def forward(self, x):
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class FPN(nn.Module):
    def __init__(self, in_channels, out_channels=PYRAMID_CHANNELS):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)

    def forward(self, feats):
        laterals = [conv(f) for conv, f in zip(self.lateral, feats)]
        top = laterals[-1]
        merged = [top]
        for lat in reversed(laterals[:-1]):
            top = lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            merged.insert(0, top)
        return [conv(m) for conv, m in zip(self.output, merged)]


class Backbone(nn.Module):
    def __init__(self, out_channels: int = PYRAMID_CHANNELS):
        super().__init__()
        self.trunk = Trunk()
        self.fpn = FPN(self.trunk.out_channels, out_channels)

    @property
    def strides(self):
        return PYRAMID_STRIDES

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """``(B, 3, H, W)`` normalized images -> ``[P2, P3, P4, P5]``."""
        H, W = images.shape[-2:]
        if H < 32 or W < 32:
            raise InputSizeError(f"image {H}x{W} is smaller than one stride-32 cell")
        return self.fpn(self.trunk(images))


def pad_to_stride(images: torch.Tensor, stride: int = 32) -> torch.Tensor:
    H, W = images.shape[-2:]
    ph = (-H) % stride
    pw = (-W) % stride
    if ph or pw:
        images = F.pad(images, (0, pw, 0, ph))
    return images
