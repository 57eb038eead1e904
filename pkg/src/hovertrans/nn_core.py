"""Neural primitives: pre-norm transformer block, conv stem, conv fusion block, pooling.

Feature maps are channels-last tensors ``(B, H, W, C)``; token sequences are
``(B, T, D)``. Convolutions permute to channels-first internally.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


def layer_norm(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * scale + shift


def multi_head_self_attention(
    x: torch.Tensor,
    wq: torch.Tensor, bq: torch.Tensor,
    wk: torch.Tensor, bk: torch.Tensor,
    wv: torch.Tensor, bv: torch.Tensor,
    wo: torch.Tensor, bo: torch.Tensor,
    heads: int,
) -> torch.Tensor:
    """Scaled dot-product self-attention. Weights are ``(D_out, D_in)`` as in ``F.linear``."""
    b, t, d = x.shape
    if d % heads:
        raise ConfigError(f"token dim {d} is not divisible by heads={heads}")
    hd = d // heads

    def split(y):
        return y.reshape(b, t, heads, hd).transpose(1, 2)

    q = split(F.linear(x, wq, bq))
    k = split(F.linear(x, wk, bk))
    v = split(F.linear(x, wv, bv))
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, t, d)
    return F.linear(out, wo, bo)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"token dim {dim} is not divisible by heads={heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        return multi_head_self_attention(
            x,
            self.q.weight, self.q.bias,
            self.k.weight, self.k.bias,
            self.v.weight, self.v.bias,
            self.proj.weight, self.proj.bias,
            self.heads,
        )


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm encoder block without class token.

    ``z' = MSA(LN(x)) + x`` followed by ``out = MLP(LN(z')) + z'``.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _nhwc(conv_out: torch.Tensor) -> torch.Tensor:
    return conv_out.permute(0, 2, 3, 1)


def _nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


class ConvStem(nn.Module):
    """Two stride-2 3x3 convolutions (BN + ReLU between): ``(H, W, 3) -> (H/4, W/4, C)``."""

    def __init__(self, out_channels: int, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)

    def forward(self, x):
        h, w = x.shape[1], x.shape[2]
        if h % 4 or w % 4:
            raise ConfigError(f"stem input {h}x{w} is not divisible by 4")
        y = F.relu(self.bn1(self.conv1(_nchw(x))))
        return _nhwc(self.conv2(y))


class ConvBlock(nn.Module):
    """1x1 expand to twice the input channels, 3x3, then 1x1 compress.

    BN + ReLU follow the first two convolutions; the compression is linear.
    Spatial size is preserved.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        hidden = 2 * in_channels
        self.expand = nn.Conv2d(in_channels, hidden, 1)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.conv = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(hidden)
        self.compress = nn.Conv2d(hidden, out_channels, 1)

    @property
    def widths(self) -> tuple[int, int, int]:
        return self.expand.out_channels, self.conv.out_channels, self.compress.out_channels

    def forward(self, x):
        y = F.relu(self.bn1(self.expand(_nchw(x))))
        y = F.relu(self.bn2(self.conv(y)))
        return _nhwc(self.compress(y))


def pool2(x: torch.Tensor) -> torch.Tensor:
    """2x2 average pooling, stride 2, on a channels-last map."""
    h, w = x.shape[1], x.shape[2]
    if h % 2 or w % 2:
        raise ConfigError(f"pool2 needs even spatial dims, got {h}x{w}")
    return _nhwc(F.avg_pool2d(_nchw(x), 2))
