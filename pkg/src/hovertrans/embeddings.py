"""Patch, horizontal-strip and vertical-strip tokenization and their inverses.

Flattening conventions (these fix checkpoint layouts):

* a patch token is the ``(p, p, C)`` tile flattened row-major;
* a horizontal strip token is the ``(hv, W, C)`` band flattened row-major;
* a vertical strip token is the ``(H, hv, C)`` band transposed to
  ``(hv, H, C)`` and flattened, so a spatially symmetric map gives identical
  horizontal and vertical tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
from torch import nn

from .errors import ConfigError

Kind = Literal["patch_grid", "h_strips", "v_strips"]


@dataclass(frozen=True)
class TokenLayout:
    kind: Kind
    rows: int
    cols: int = 1

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass
class TokenSequence:
    data: torch.Tensor  # (B, T, D)
    layout: TokenLayout

    def __post_init__(self):
        if self.data.shape[1] != self.layout.count:
            raise ConfigError(f"{self.data.shape[1]} tokens do not match layout {self.layout}")


@dataclass(frozen=True)
class TokenGeometry:
    """Tokenization of one square stage map of ``side`` pixels."""

    side: int
    p: int
    hv: int

    def __post_init__(self):
        if self.side % self.p:
            raise ConfigError(f"patch size p={self.p} does not divide map side {self.side}")
        if self.side % self.hv:
            raise ConfigError(f"strip thickness hv={self.hv} does not divide map side {self.side}")
        if self.hv % self.p and self.p % self.hv:
            raise ConfigError(f"p={self.p} and hv={self.hv} are not aligned (neither divides the other)")

    @property
    def grid(self) -> int:
        return self.side // self.p

    @property
    def strips(self) -> int:
        return self.side // self.hv

    def grid_layout(self) -> TokenLayout:
        return TokenLayout("patch_grid", self.grid, self.grid)


def check_geometry(side: int, p: int, hv: int) -> str | None:
    """Return the reason a geometry is illegal, or ``None`` when it is legal."""
    try:
        TokenGeometry(side, p, hv)
    except ConfigError as exc:
        return str(exc)
    return None


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C)`` in row-major grid order."""
    b, h, w, c = x.shape
    if h % p or w % p:
        raise ConfigError(f"patch size p={p} does not divide map {h}x{w}")
    t = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return t.reshape(b, (h // p) * (w // p), p * p * c)


def hstrips(x: torch.Tensor, hv: int) -> torch.Tensor:
    b, h, w, c = x.shape
    if h % hv:
        raise ConfigError(f"strip thickness hv={hv} does not divide height {h}")
    return x.reshape(b, h // hv, hv * w * c)


def vstrips(x: torch.Tensor, hv: int) -> torch.Tensor:
    return hstrips(x.transpose(1, 2), hv)


def tokens_to_map(tokens: TokenSequence, p: int, channels: int) -> torch.Tensor:
    """Inverse of :func:`patchify`: unflatten each token into a ``p x p x C`` tile."""
    layout = tokens.layout
    if layout.kind != "patch_grid":
        raise ConfigError(f"tokens_to_map needs a patch_grid layout, got {layout.kind}")
    b, _, d = tokens.data.shape
    if d != p * p * channels:
        raise ConfigError(f"token dim {d} != p^2*C = {p * p * channels}")
    t = tokens.data.reshape(b, layout.rows, layout.cols, p, p, channels).permute(0, 1, 3, 2, 4, 5)
    return t.reshape(b, layout.rows * p, layout.cols * p, channels)


def broadcast_strips(strips: torch.Tensor, geom: TokenGeometry, axis: Literal["horizontal", "vertical"]) -> torch.Tensor:
    """Place strip tokens onto the patch grid.

    Grid cell ``(r, c)`` receives horizontal strip ``floor(r*p/hv)`` or
    vertical strip ``floor(c*p/hv)``.
    """
    if strips.shape[1] != geom.strips:
        raise ConfigError(f"expected {geom.strips} strips, got {strips.shape[1]}")
    n = geom.grid
    index = torch.arange(n) * geom.p // geom.hv
    b, _, d = strips.shape
    picked = strips[:, index]  # (B, n, D)
    if axis == "horizontal":
        grid = picked[:, :, None, :].expand(b, n, n, d)
    elif axis == "vertical":
        grid = picked[:, None, :, :].expand(b, n, n, d)
    else:
        raise ConfigError(f"unknown axis {axis!r}")
    return grid.reshape(b, n * n, d)


class Embedding(nn.Module):
    """Linear projection plus an optional learned positional table."""

    def __init__(self, in_dim: int, dim: int, tokens: int, positional: bool = True):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim)
        self.pos = nn.Parameter(torch.zeros(tokens, dim)) if positional else None

    def forward(self, flat: torch.Tensor) -> torch.Tensor:
        z = self.proj(flat)
        return z + self.pos if self.pos is not None else z


class PatchEmbed(Embedding):
    def __init__(self, geom: TokenGeometry, channels: int, dim: int, positional: bool = True):
        super().__init__(geom.p * geom.p * channels, dim, geom.grid**2, positional)
        self.geom = geom

    def forward(self, x: torch.Tensor) -> TokenSequence:
        return TokenSequence(super().forward(patchify(x, self.geom.p)), self.geom.grid_layout())


class StripEmbed(Embedding):
    def __init__(self, geom: TokenGeometry, channels: int, dim: int, axis: str, positional: bool = True):
        super().__init__(geom.hv * geom.side * channels, dim, geom.strips, positional)
        self.geom = geom
        self.axis = axis

    def forward(self, x: torch.Tensor) -> TokenSequence:
        if x.shape[1] != self.geom.side or x.shape[2] != self.geom.side:
            raise ConfigError(f"strip embedding expects a {self.geom.side}x{self.geom.side} map, got {tuple(x.shape[1:3])}")
        if self.axis == "horizontal":
            flat, kind = hstrips(x, self.geom.hv), "h_strips"
        else:
            flat, kind = vstrips(x, self.geom.hv), "v_strips"
        return TokenSequence(super().forward(flat), TokenLayout(kind, self.geom.strips))

