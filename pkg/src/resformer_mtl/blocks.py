"""Residual convolution block, shifted-window transformer block and window helpers.

Token grids are laid out as (B, H, W, C); feature maps as (B, C, H, W).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .backend import Parameter, ShapeError, Tensor, ops
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module

MASK_VALUE = -100.0


class ResNetBlock(Module):
    """Basic two-conv residual block: relu(x + BN(conv(relu(BN(conv(x))))))."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1, bias=False)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"ResNetBlock: channel axis (1) is {x.shape[1]}, block expects {self.channels}"
            )
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return ops.relu(ops.add(x, h))


# ---------------------------------------------------------------------------
# window machinery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowConfig:
    window_size: int
    shift: int

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift must satisfy 0 <= s < M, got s={self.shift}, M={self.window_size}")

    @classmethod
    def standard(cls, window_size: int) -> "WindowConfig":
        return cls(window_size, window_size // 2)

    def for_grid(self, h: int, w: int) -> "WindowConfig":
        """Window actually used on an h x w grid.

        A grid no larger than one window is attended as a single window with
        no shift; otherwise the configured window is used.
        """
        if min(h, w) <= self.window_size:
            return WindowConfig(min(h, w), 0)
        return self


def window_partition(x: Tensor, m: int) -> Tensor:
    """(B, H, W, C) -> (B * H/m * W/m, m*m, C), windows in raster order."""
    b, h, w, c = x.shape
    if h % m or w % m:
        raise ShapeError(f"window_partition: grid {(h, w)} not divisible by window {m}")
    t = ops.reshape(x, (b, h // m, m, w // m, m, c))
    t = ops.transpose(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (b * (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if h % m or w % m:
        raise ShapeError(f"window_reverse: grid {(h, w)} not divisible by window {m}")
    n_win = (h // m) * (w // m)
    c = windows.shape[-1]
    b = windows.shape[0] // n_win
    t = ops.reshape(windows, (b, h // m, w // m, m, m, c))
    t = ops.transpose(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (b, h, w, c))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Roll a (B, H, W, C) grid by (-s, -s)."""
    if s == 0:
        return x
    return ops.roll(x, (-s, -s), (1, 2))


def cyclic_unshift(x: Tensor, s: int) -> Tensor:
    if s == 0:
        return x
    return ops.roll(x, (s, s), (1, 2))


def shift_attention_mask(h: int, w: int, m: int, s: int) -> Optional[np.ndarray]:
    """Additive mask (n_windows, m*m, m*m) for attention on a rolled grid.

    Tokens that were not neighbours before the roll carry different region
    ids; pairs with differing ids get ``MASK_VALUE``.
    """
    if s == 0:
        return None
    region = np.zeros((h, w), dtype=np.int64)
    bands = (slice(0, -m), slice(-m, -s), slice(-s, None))
    label = 0
    for hs in bands:
        for ws in bands:
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = win[:, :, None] != win[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0)


def relative_position_index(m: int, table_window: int) -> np.ndarray:
    """(m*m, m*m) indices into a ((2M-1)^2, heads) bias table, M = table_window."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (table_window - 1)
    return rel[0] * (2 * table_window - 1) + rel[1]


class WindowAttention(Module):
    """Multi-head self-attention inside each window, with relative position bias."""

    def __init__(
        self,
        channels: int,
        heads: int,
        window_size: int,
        rng: np.random.Generator,
        use_position_bias: bool = True,
    ):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        self.channels = channels
        self.heads = heads
        self.window_size = window_size
        self.qkv = Linear(channels, 3 * channels, rng)
        self.proj = Linear(channels, channels, rng)
        if use_position_bias:
            self.position_bias = Parameter(
                0.02 * rng.standard_normal(((2 * window_size - 1) ** 2, heads))
            )
        else:
            self.position_bias = None

    def attention_weights(self, windows: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Return (softmax weights (Nw, heads, N, N), values (Nw, heads, N, d))."""
        nw, n, c = windows.shape
        if c != self.channels:
            raise ShapeError(f"WindowAttention: channel axis is {c}, expected {self.channels}")
        m = int(round(math.sqrt(n)))
        if m * m != n:
            raise ShapeError(f"WindowAttention: {n} tokens per window is not a square")
        if m > self.window_size:
            raise ShapeError(f"WindowAttention: window {m} exceeds bias table window {self.window_size}")
        d = c // self.heads
        qkv = ops.reshape(self.qkv(windows), (nw, n, 3, self.heads, d))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ops.matmul(ops.mul(q, 1.0 / math.sqrt(d)), ops.transpose(k, (0, 1, 3, 2)))
        if self.position_bias is not None:
            idx = relative_position_index(m, self.window_size)
            bias = ops.take(self.position_bias, idx.reshape(-1))  # (N*N, heads)
            bias = ops.transpose(ops.reshape(bias, (n, n, self.heads)), (2, 0, 1))
            scores = ops.add(scores, bias)
        if mask is not None:
            mask = np.asarray(mask)
            if mask.ndim != 3 or mask.shape[1:] != (n, n) or nw % mask.shape[0]:
                raise ShapeError(
                    f"WindowAttention: mask shape {mask.shape} incompatible with "
                    f"{nw} windows of {n} tokens"
                )
            nwin = mask.shape[0]
            scores = ops.reshape(scores, (nw // nwin, nwin, self.heads, n, n))
            scores = ops.add(scores, mask[None, :, None].astype(scores.dtype))
            scores = ops.reshape(scores, (nw, self.heads, n, n))
        return ops.softmax(scores, axis=-1), v

    def forward(self, windows: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        nw, n, c = windows.shape
        attn, v = self.attention_weights(windows, mask)
        out = ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3))
        return self.proj(ops.reshape(out, (nw, n, c)))


class FeedForward(Module):
    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(channels, ratio * channels, rng)
        self.fc2 = Linear(ratio * channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class SwinBlock(Module):
    """W-MSA and SW-MSA stages, each followed by a feed-forward stage.

    Every sublayer is pre-normalised and wrapped in a residual connection.
    Grids that are not window multiples are zero-padded on the bottom/right
    before the block and cropped afterwards.
    """

    def __init__(
        self,
        channels: int,
        heads: int,
        window: WindowConfig,
        rng: np.random.Generator,
        ffn_ratio: int = 4,
        use_position_bias: bool = True,
    ):
        super().__init__()
        self.channels = channels
        self.window = window
        self.ln1 = LayerNorm(channels)
        self.attn_w = WindowAttention(channels, heads, window.window_size, rng, use_position_bias)
        self.ln2 = LayerNorm(channels)
        self.ffn1 = FeedForward(channels, ffn_ratio, rng)
        self.ln3 = LayerNorm(channels)
        self.attn_sw = WindowAttention(channels, heads, window.window_size, rng, use_position_bias)
        self.ln4 = LayerNorm(channels)
        self.ffn2 = FeedForward(channels, ffn_ratio, rng)

    def _msa(self, attn: WindowAttention, x: Tensor, m: int, s: int) -> Tensor:
        _, h, w, _ = x.shape
        shifted = cyclic_shift(x, s)
        windows = window_partition(shifted, m)
        out = attn(windows, shift_attention_mask(h, w, m, s))
        return cyclic_unshift(window_reverse(out, m, h, w), s)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.channels:
            raise ShapeError(
                f"SwinBlock: expected (B,H,W,{self.channels}) token grid, got {x.shape}"
            )
        _, h, w, _ = x.shape
        win = self.window.for_grid(h, w)
        m = win.window_size
        ph, pw = (-h) % m, (-w) % m
        t = ops.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0))) if (ph or pw) else x

        t = ops.add(self._msa(self.attn_w, self.ln1(t), m, 0), t)
        t = ops.add(self.ffn1(self.ln2(t)), t)
        t = ops.add(self._msa(self.attn_sw, self.ln3(t), m, win.shift), t)
        t = ops.add(self.ffn2(self.ln4(t)), t)

        if ph or pw:
            t = t[:, :h, :w, :]
        return t


def split_tokens(x: Tensor) -> Tensor:
    """Feature map (B, C, H, W) -> token grid (B, H, W, C); 1x1 patches."""
    return ops.transpose(x, (0, 2, 3, 1))


def merge_tokens(t: Tensor) -> Tensor:
    """Token grid (B, H, W, C) -> feature map (B, C, H, W)."""
    return ops.transpose(t, (0, 3, 1, 2))
