"""The four-branch HoVer-Trans block and the stage that wraps it.

Branch update for one block, with ``B_h``/``B_v`` the strip-to-grid
broadcasts from :mod:`hovertrans.embeddings`::

    z_h'   = Trans_H(z_h)
    z_v'   = Trans_V(z_v)
    z_h2v' = Trans_H2V_out(Trans_H2V_in(B_h(z_h') + z_h2v) + B_v(z_v'))
    z_v2h' = Trans_V2H_out(Trans_V2H_in(B_v(z_v') + z_v2h) + B_h(z_h'))

Ablation variants drop the H and/or V branch structurally; the matching
broadcast terms then vanish from the main branches.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .embeddings import PatchEmbed, StripEmbed, TokenGeometry, TokenSequence, broadcast_strips, tokens_to_map
from .errors import ConfigError
from .nn_core import ConvBlock, TransformerBlock, pool2

VARIANTS = ("full", "model_p", "model_p_v", "model_p_h")


def variant_branches(variant: str) -> tuple[bool, bool]:
    """``(use_h, use_v)`` for a variant name."""
    try:
        return {
            "full": (True, True),
            "model_p": (False, False),
            "model_p_v": (False, True),
            "model_p_h": (True, False),
        }[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}") from None


@dataclass
class HoverState:
    h2v: torch.Tensor
    v2h: torch.Tensor
    h: torch.Tensor | None = None
    v: torch.Tensor | None = None


class HoverBlock(nn.Module):
    def __init__(self, geom: TokenGeometry, dim: int, heads: int, use_h: bool = True, use_v: bool = True):
        super().__init__()
        self.geom = geom
        self.trans_h = TransformerBlock(dim, heads) if use_h else None
        self.trans_v = TransformerBlock(dim, heads) if use_v else None
        self.h2v_inner = TransformerBlock(dim, heads)
        self.h2v_outer = TransformerBlock(dim, heads)
        self.v2h_inner = TransformerBlock(dim, heads)
        self.v2h_outer = TransformerBlock(dim, heads)

    def _check(self, state: HoverState) -> None:
        n = self.geom.grid**2
        if state.h2v.shape != state.v2h.shape or state.h2v.shape[1] != n:
            raise ConfigError(f"main branches must both hold {n} grid tokens")
        for name, t, used in (("h", state.h, self.trans_h), ("v", state.v, self.trans_v)):
            if used is not None and (t is None or t.shape[1] != self.geom.strips):
                raise ConfigError(f"{name} branch must hold {self.geom.strips} strip tokens")

    def forward(self, state: HoverState) -> HoverState:
        self._check(state)
        h = self.trans_h(state.h) if self.trans_h is not None else None
        v = self.trans_v(state.v) if self.trans_v is not None else None
        bh = broadcast_strips(h, self.geom, "horizontal") if h is not None else None
        bv = broadcast_strips(v, self.geom, "vertical") if v is not None else None

        h2v = state.h2v if bh is None else bh + state.h2v
        h2v = self.h2v_inner(h2v)
        h2v = self.h2v_outer(h2v if bv is None else h2v + bv)

        v2h = state.v2h if bv is None else bv + state.v2h
        v2h = self.v2h_inner(v2h)
        v2h = self.v2h_outer(v2h if bh is None else v2h + bh)
        return HoverState(h2v=h2v, v2h=v2h, h=h, v=v)


class HoverStage(nn.Module):
    """Embed, run ``depth`` HoVer blocks, fuse the main branches with a Conv block, pool.

    ``(side, side, C) -> (side/2, side/2, 2C)``; with ``pool=False`` the
    spatial size is kept.
    """

    def __init__(
        self,
        side: int,
        channels: int,
        depth: int,
        heads: int,
        p: int,
        hv: int,
        variant: str = "full",
        positional: bool = True,
        pool: bool = True,
    ):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"stage depth must be >= 1, got {depth}")
        self.geom = TokenGeometry(side, p, hv)
        self.channels = channels
        self.dim = p * p * channels
        if self.dim % heads:
            raise ConfigError(f"token dim {self.dim} (p^2*C) is not divisible by heads={heads}")
        use_h, use_v = variant_branches(variant)
        self.patch_embed = PatchEmbed(self.geom, channels, self.dim, positional)
        self.h_embed = StripEmbed(self.geom, channels, self.dim, "horizontal", positional) if use_h else None
        self.v_embed = StripEmbed(self.geom, channels, self.dim, "vertical", positional) if use_v else None
        self.blocks = nn.ModuleList(HoverBlock(self.geom, self.dim, heads, use_h, use_v) for _ in range(depth))
        self.conv = ConvBlock(2 * channels, 2 * channels)
        self.pool = pool

    def embed(self, x: torch.Tensor) -> HoverState:
        if x.shape[1:] != (self.geom.side, self.geom.side, self.channels):
            raise ConfigError(
                f"stage expects ({self.geom.side}, {self.geom.side}, {self.channels}) maps, got {tuple(x.shape[1:])}"
            )
        z = self.patch_embed(x).data
        return HoverState(
            h2v=z,
            v2h=z,
            h=self.h_embed(x).data if self.h_embed is not None else None,
            v=self.v_embed(x).data if self.v_embed is not None else None,
        )

    def fuse(self, state: HoverState) -> torch.Tensor:
        layout = self.geom.grid_layout()
        p = self.geom.p
        maps = [tokens_to_map(TokenSequence(t, layout), p, self.channels) for t in (state.h2v, state.v2h)]
        return self.conv(torch.cat(maps, dim=-1))

    def forward(self, x: torch.Tensor, return_fused: bool = False):
        state = self.embed(x)
        for block in self.blocks:
            state = block(state)
        fused = self.fuse(state)
        out = pool2(fused) if self.pool else fused
        return (out, fused) if return_fused else out


def transpose_state(state: HoverState, grid: int) -> HoverState:
    """Mirror a state across the main diagonal: swap H/V and transpose the grids."""

    def t(z):
        b, _, d = z.shape
        return z.reshape(b, grid, grid, d).transpose(1, 2).reshape(b, grid * grid, d)

    return replace(state, h=state.v, v=state.h, h2v=t(state.v2h), v2h=t(state.h2v))
