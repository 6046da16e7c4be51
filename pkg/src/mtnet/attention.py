"""Channel and spatial attention gates for 3D feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor

POOLING_KINDS = ("avg", "max", "both")
ORDERS = ("channel_spatial", "spatial_channel")


@dataclass
class ChannelAttentionParams:
    """Shared two-layer MLP ``C -> C/r -> C`` applied to pooled channel descriptors."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    reduction_ratio: int
    pooling: str = "both"

    def tensors(self) -> dict[str, Tensor]:
        return {"mlp1.w": self.w1, "mlp1.b": self.b1, "mlp2.w": self.w2, "mlp2.b": self.b2}


@dataclass
class SpatialAttentionParams:
    kernel: Tensor  # (1, 2, k, k, k)
    bias: Tensor  # (1,)

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[-1]

    def tensors(self) -> dict[str, Tensor]:
        return {"conv.w": self.kernel, "conv.b": self.bias}


def init_channel_attention(channels: int, reduction_ratio: int, rng: np.random.Generator,
                           pooling: str = "both", dtype=np.float32) -> ChannelAttentionParams:
    if reduction_ratio < 1 or channels % reduction_ratio:
        raise ValueError(f"channels ({channels}) must be divisible by reduction_ratio ({reduction_ratio})")
    if pooling not in POOLING_KINDS:
        raise ValueError(f"pooling must be one of {POOLING_KINDS}")
    hidden = channels // reduction_ratio
    return ChannelAttentionParams(
        w1=Tensor(rng.normal(0.0, np.sqrt(2.0 / channels), (channels, hidden)).astype(dtype), requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype), requires_grad=True),
        w2=Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, channels)).astype(dtype), requires_grad=True),
        b2=Tensor(np.zeros(channels, dtype), requires_grad=True),
        reduction_ratio=reduction_ratio,
        pooling=pooling,
    )


def init_spatial_attention(kernel_size: int, rng: np.random.Generator, dtype=np.float32) -> SpatialAttentionParams:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"spatial attention kernel size must be odd, got {kernel_size}")
    fan_in = 2 * kernel_size**3
    k = rng.normal(0.0, np.sqrt(1.0 / fan_in), (1, 2, kernel_size, kernel_size, kernel_size)).astype(dtype)
    return SpatialAttentionParams(kernel=Tensor(k, requires_grad=True), bias=Tensor(np.zeros(1, dtype), requires_grad=True))


def _mlp(v: Tensor, p: ChannelAttentionParams) -> Tensor:
    return ops.dense(ops.relu(ops.dense(v, p.w1, p.b1)), p.w2, p.b2)


def channel_attention(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    c = x.shape[1]
    if c % p.reduction_ratio:
        raise ValueError(f"channels ({c}) must be divisible by reduction_ratio ({p.reduction_ratio})")
    if p.w1.shape[0] != c:
        raise ValueError(f"channel attention built for {p.w1.shape[0]} channels, input has {c}")
    if p.pooling == "avg":
        logits = _mlp(ops.global_avg_pool(x), p)
    elif p.pooling == "max":
        logits = _mlp(ops.global_max_pool(x), p)
    else:
        logits = ops.add(_mlp(ops.global_avg_pool(x), p), _mlp(ops.global_max_pool(x), p))
    return ops.broadcast_mul_channels(x, ops.sigmoid(logits))


def spatial_mask(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Per-voxel gate in (0, 1) of shape (N, 1, D, H, W)."""
    k = p.kernel_size
    if k % 2 == 0:
        raise ValueError(f"spatial attention kernel size must be odd, got {k}")
    pooled = ops.concat([ops.mean_axis(x, 1), ops.max_axis(x, 1)], axis=1)
    return ops.sigmoid(ops.conv3d(pooled, p.kernel, p.bias, stride=1, padding=k // 2))


def spatial_attention(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    return ops.mul(x, spatial_mask(x, p))


def attention_block(x: Tensor, cp: ChannelAttentionParams, sp: SpatialAttentionParams,
                    order: str = "channel_spatial") -> Tensor:
    if order == "channel_spatial":
        return spatial_attention(channel_attention(x, cp), sp)
    if order == "spatial_channel":
        return channel_attention(spatial_attention(x, sp), cp)
    raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
