"""Dilated feature enhancement (DFE) on skip connections and the decoder."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .backend import ShapeError, Tensor, ops
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Module


class DilatedBranch(Module):
    """BN(conv1x1(BN(dilated conv3x3(x)))), size-preserving (padding = dilation)."""

    def __init__(self, channels: int, dilation: int, rng: np.random.Generator):
        super().__init__()
        self.dilation = dilation
        self.dconv = Conv2d(channels, channels, 3, rng, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = BatchNorm2d(channels)
        self.pconv = Conv2d(channels, channels, 1, rng, bias=False)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn2(self.pconv(self.bn1(self.dconv(x))))


class SpatialAttention(Module):
    """Gate a feature map by sigmoid(conv7x7([mean_c(x), max_c(x)]))."""

    def __init__(self, rng: np.random.Generator, kernel_size: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel_size, rng, padding=kernel_size // 2)

    def gate(self, x: Tensor) -> Tensor:
        pooled = ops.concat(
            [ops.mean(x, axis=1, keepdims=True), ops.max(x, axis=1, keepdims=True)], axis=1
        )
        return ops.sigmoid(self.conv(pooled))

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(x, self.gate(x))


class DFE(Module):
    def __init__(self, channels: int, dilation_rates: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.branches = [DilatedBranch(channels, d, rng) for d in dilation_rates]
        self.attention = SpatialAttention(rng)

    def branch(self, x: Tensor, dilation: int) -> Tensor:
        for b in self.branches:
            if b.dilation == dilation:
                return b(x)
        raise ValueError(f"no DFE branch with dilation {dilation}")

    def forward(self, x: Tensor) -> Tensor:
        total = self.branches[0](x)
        for b in self.branches[1:]:
            total = ops.add(total, b(x))
        return self.attention(ops.relu(total))


class DecoderLevel(Module):
    """upsample(relu(BN(conv3x3(concat(skip, previous)))))."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.in_channels = in_channels
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, skip: Tensor, previous: Tensor) -> Tensor:
        return ops.upsample_bilinear2x(
            ops.relu(self.bn(self.conv(ops.concat([skip, previous], axis=1))))
        )


class Decoder(Module):
    """Decoder seeded by the enhanced deepest feature, then three fusion levels.

    Level 1 output is the upsampled enhanced level-4 feature; levels 2..4 fuse
    the enhanced encoder feature of level 5-i with the previous decoder output.
    The final output is at full input resolution.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        ch = cfg.channels
        self.use_dfe = cfg.use_dfe
        self.dfe = [DFE(c, cfg.dilation_rates, rng) for c in ch] if cfg.use_dfe else []
        dec = cfg.decoder_channels
        incoming = [ch[3], dec[0], dec[1]]
        self.levels = [
            DecoderLevel(ch[2 - j] + incoming[j], dec[j], rng) for j in range(3)
        ]
        self.out_channels = dec[2]

    def enhance(self, features: Sequence[Tensor]) -> List[Tensor]:
        if not self.use_dfe:
            return list(features)
        return [dfe(f) for dfe, f in zip(self.dfe, features)]

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        if len(features) != 4:
            raise ShapeError(f"Decoder needs four encoder features, got {len(features)}")
        enhanced = self.enhance(features)
        x = ops.upsample_bilinear2x(enhanced[3])
        for j, level in enumerate(self.levels):
            skip = enhanced[2 - j]
            if skip.shape[2:] != x.shape[2:]:
                raise ShapeError(
                    f"Decoder level {j + 2}: skip resolution {skip.shape[2:]} does not match "
                    f"decoder resolution {x.shape[2:]}"
                )
            x = level(skip, x)
        return x
