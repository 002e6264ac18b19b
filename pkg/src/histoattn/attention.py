"""CBAM (channel then spatial gating), spatial self-attention and
deformable attention over (B, C, H, W) feature maps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor

SPATIAL_KERNEL = 7


@dataclass
class ChannelAttentionParams:
    w0: Tensor  # (C, C // r)
    w1: Tensor  # (C // r, C)
    reduction_ratio: int

    @property
    def channels(self) -> int:
        return self.w0.shape[0]


@dataclass
class SpatialAttentionParams:
    kernel: Tensor  # (1, 2, 7, 7)


@dataclass
class SelfAttentionParams:
    wq: Tensor  # (C, d)
    wk: Tensor
    wv: Tensor
    wo: Optional[Tensor] = None  # (d, C); needed only when d != C

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.wq.shape[1])


@dataclass
class DeformableAttentionParams:
    offset_kernel: Tensor  # (2*kh*kw, C, 3, 3)
    value_kernel: Tensor   # (C, C, kh, kw)


def default_reduction(channels: int) -> int:
    return 16 if channels >= 64 else 4


# ---------------------------------------------------------------------------
# initialisation helpers
# ---------------------------------------------------------------------------

def init_channel(channels: int, r: Optional[int], rng: np.random.Generator, init) -> ChannelAttentionParams:
    r = r or default_reduction(channels)
    if channels % r:
        raise ConfigError(f"channel count {channels} not divisible by reduction ratio {r}")
    hidden = channels // r
    return ChannelAttentionParams(Tensor(init(rng, (channels, hidden), channels)),
                                  Tensor(init(rng, (hidden, channels), hidden)), r)


def init_spatial(rng: np.random.Generator, init) -> SpatialAttentionParams:
    k = SPATIAL_KERNEL
    return SpatialAttentionParams(Tensor(init(rng, (1, 2, k, k), 2 * k * k)))


def init_self(channels: int, d: Optional[int], rng: np.random.Generator, init) -> SelfAttentionParams:
    d = d or channels
    p = SelfAttentionParams(*(Tensor(init(rng, (channels, d), channels)) for _ in range(3)))
    if d != channels:
        p.wo = Tensor(init(rng, (d, channels), d))
    return p


def init_deformable(channels: int, rng: np.random.Generator, init, kh: int = 3,
                    kw: int = 3) -> DeformableAttentionParams:
    # zero offsets: training starts from the plain convolution
    off = Tensor(np.zeros((2 * kh * kw, channels, 3, 3)))
    val = Tensor(init(rng, (channels, channels, kh, kw), channels * kh * kw))
    return DeformableAttentionParams(off, val)


# ---------------------------------------------------------------------------
# CBAM
# ---------------------------------------------------------------------------

def _check_fmap(f: Tensor) -> None:
    if f.ndim != 4:
        raise ShapeError(f"feature map must be (B, C, H, W), got {f.shape}")


def channel_attention(f, p: ChannelAttentionParams) -> tuple[Tensor, Tensor]:
    """Returns (gate of shape (B, C), gated feature map)."""
    f = as_tensor(f)
    _check_fmap(f)
    if f.shape[1] != p.channels:
        raise ShapeError(f"channel attention built for {p.channels} channels, got {f.shape[1]}")

    def mlp(v):
        return ops.matmul(ops.relu(ops.matmul(v, p.w0)), p.w1)

    m_c = ops.sigmoid(ops.add(mlp(ops.global_pool(f, "avg")), mlp(ops.global_pool(f, "max"))))
    B, C = m_c.shape
    return m_c, ops.mul(f, ops.reshape(m_c, (B, C, 1, 1)))


def spatial_attention(f, p: SpatialAttentionParams) -> tuple[Tensor, Tensor]:
    """Returns (gate of shape (B, 1, H, W), gated feature map)."""
    f = as_tensor(f)
    _check_fmap(f)
    if p.kernel.shape != (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL):
        raise ShapeError(f"spatial kernel must be (1, 2, 7, 7), got {p.kernel.shape}")
    pooled = ops.concat([ops.mean(f, axis=1, keepdims=True), ops.max(f, axis=1, keepdims=True)], axis=1)
    m_s = ops.sigmoid(ops.conv2d(pooled, p.kernel, stride=1, padding=SPATIAL_KERNEL // 2))
    return m_s, ops.mul(f, m_s)


def cbam(f, cp: ChannelAttentionParams, sp: SpatialAttentionParams) -> Tensor:
    _, refined = channel_attention(f, cp)
    _, out = spatial_attention(refined, sp)
    return out


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

def attention_weights(f, p: SelfAttentionParams) -> Tensor:
    """Row-stochastic (B, N, N) matrix over the N = H*W spatial tokens."""
    f = as_tensor(f)
    B, C, H, W = f.shape
    x = ops.transpose(ops.reshape(f, (B, C, H * W)), (0, 2, 1))
    q = ops.matmul(x, p.wq)
    k = ops.matmul(x, p.wk)
    return ops.softmax(ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), p.scale), axis=-1)


def self_attention(f, p: SelfAttentionParams) -> Tensor:
    """Scaled dot-product attention over spatial tokens with a residual."""
    f = as_tensor(f)
    _check_fmap(f)
    B, C, H, W = f.shape
    if p.wq.shape[0] != C:
        raise ShapeError(f"self-attention built for {p.wq.shape[0]} channels, got {C}")
    d = p.wv.shape[1]
    if d != C and p.wo is None:
        raise ConfigError(f"value width {d} differs from channels {C} and no output projection is set")
    x = ops.transpose(ops.reshape(f, (B, C, H * W)), (0, 2, 1))
    a = attention_weights(f, p)
    y = ops.matmul(a, ops.matmul(x, p.wv))
    if p.wo is not None:
        y = ops.matmul(y, p.wo)
    y = ops.reshape(ops.transpose(y, (0, 2, 1)), (B, C, H, W))
    return ops.add(f, y)


# ---------------------------------------------------------------------------
# deformable attention
# ---------------------------------------------------------------------------

def sampling_offsets(f, p: DeformableAttentionParams) -> Tensor:
    return ops.conv2d(f, p.offset_kernel, stride=1, padding=p.offset_kernel.shape[2] // 2)


def deformable_attention(f, p: DeformableAttentionParams) -> Tensor:
    """Convolution with ``value_kernel`` whose taps are displaced by offsets
    predicted per position from ``f``; zero offsets give conv2d exactly."""
    f = as_tensor(f)
    _check_fmap(f)
    B, C, H, W = f.shape
    O, Ci, kh, kw = p.value_kernel.shape
    if Ci != C or p.offset_kernel.shape[:2] != (2 * kh * kw, C):
        raise ShapeError("deformable attention parameters do not match the feature map")
    cols = ops.deform_gather(f, sampling_offsets(f, p), kh, kw, padding=kh // 2)
    w = ops.reshape(p.value_kernel, (O, C, kh * kw))
    return ops.einsum("bckyx,ock->boyx", cols, w)


def parameter_count(kind: str, channels: int, reduction: Optional[int] = None, kh: int = 3,
                    kw: int = 3) -> int:
    """Closed-form parameter count of one attention block."""
    if kind == "none":
        return 0
    if kind == "cbam":
        r = reduction or default_reduction(channels)
        return 2 * channels * (channels // r) + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL
    if kind == "self":
        return 3 * channels * channels
    if kind == "deformable":
        return 2 * kh * kw * channels * 9 + channels * channels * kh * kw
    raise ConfigError(f"unknown attention kind {kind!r}")
