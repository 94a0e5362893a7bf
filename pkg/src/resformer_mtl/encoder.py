"""Four-level ResFormer encoder: stem, ResFormer blocks and patch merging."""
from __future__ import annotations

from typing import List

import numpy as np

from .backend import ShapeError, Tensor, ops
from .blocks import ResNetBlock, SwinBlock, WindowConfig, merge_tokens, split_tokens
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Module


class Stem(Module):
    """3x3 conv + BN + ReLU + 2x2 max-pool: (B, 3, H, W) -> (B, C, H/2, W/2)."""

    def __init__(self, out_channels: int, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, image: Tensor) -> Tensor:
        _, _, h, w = image.shape
        if h % 2 or w % 2:
            raise ShapeError(f"Stem: spatial size {(h, w)} must be even")
        return ops.max_pool2d(ops.relu(self.bn(self.conv(image))), 2, 2)


class PatchMerging(Module):
    """Stride-2 3x3 convolution that halves resolution and doubles channels."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"PatchMerging: spatial size {(h, w)} must be even")
        return self.conv(x)


class ResFormerBlock(Module):
    """Residual conv block joined with a Swin block, sequentially or in parallel."""

    def __init__(
        self,
        channels: int,
        heads: int,
        cfg: ModelConfig,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.variant = cfg.variant
        self.channels = channels
        self.resnet = ResNetBlock(channels, rng)
        self.swin = SwinBlock(
            channels,
            heads,
            WindowConfig(cfg.window_size, cfg.shift),
            rng,
            ffn_ratio=cfg.ffn_ratio,
            use_position_bias=cfg.use_position_bias,
        )

    def transformer(self, x: Tensor) -> Tensor:
        return merge_tokens(self.swin(split_tokens(x)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"ResFormerBlock: channel axis (1) is {x.shape[1]}, level expects {self.channels}"
            )
        if self.variant == "sequential":
            return self.transformer(self.resnet(x))
        return ops.add(self.resnet(x), self.transformer(x))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        ch = cfg.channels
        self.stem = Stem(ch[0], rng)
        self.levels = [ResFormerBlock(ch[i], cfg.heads[i], cfg, rng) for i in range(4)]
        self.merges = [PatchMerging(ch[i], ch[i + 1], rng) for i in range(3)]

    def forward(self, image: Tensor) -> List[Tensor]:
        """Return the four level outputs at 1/2, 1/4, 1/8 and 1/16 resolution."""
        _, _, h, w = image.shape
        if h % 16 or w % 16:
            raise ShapeError(f"Encoder: spatial size {(h, w)} must be divisible by 16")
        x = self.stem(image)
        features = []
        for i, level in enumerate(self.levels):
            if i > 0:
                x = self.merges[i - 1](x)
            x = level(x)
            features.append(x)
        return features
