"""End-to-end network: conv stem, four HoVer stages, pooled linear head.

Also owns :class:`ModelConfig`, the cross-entropy loss and checkpoint I/O.
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ValidationError
from .hover import VARIANTS, HoverStage
from .nn_core import ConvStem, LayerNorm

CHECKPOINT_FORMAT = "hovertrans-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_side: int = 256
    p: int = 2
    hv: int = 2
    stage_channels: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    stage_depths: list[int] = field(default_factory=lambda: [2, 4, 4, 2])
    stage_heads: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    num_classes: int = 2
    variant: str = "full"
    positional: bool = True
    final_pool: bool = True

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        self.stage_depths = list(self.stage_depths)
        self.stage_heads = list(self.stage_heads)
        self.validate()

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small configuration for tests and desk-scale experiments.

        32px input gives a 1x1 stage-4 map, so the final pooling is off.
        """
        base = dict(
            input_side=32, p=1, hv=1,
            stage_channels=[2, 4, 8, 16], stage_depths=[1, 1, 1, 1], stage_heads=[1, 2, 2, 4],
            final_pool=False,
        )
        base.update(overrides)
        return cls(**base)

    def stage_sides(self) -> list[int]:
        return [self.input_side // 4 // 2**s for s in range(4)]

    def token_dims(self) -> list[int]:
        return [self.p * self.p * c for c in self.stage_channels]

    def validate(self) -> None:
        for name in ("stage_channels", "stage_depths", "stage_heads"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"{name} must have 4 entries, got {getattr(self, name)}")
        if self.input_side < 32 or self.input_side % 32:
            raise ConfigError(f"input_side must be a positive multiple of 32, got {self.input_side}")
        if self.final_pool and self.input_side % 64:
            raise ConfigError(f"final_pool needs input_side divisible by 64 (stage-4 map must be even), got {self.input_side}")
        ch = self.stage_channels
        if ch[0] < 1 or any(ch[s + 1] != 2 * ch[s] for s in range(3)):
            raise ConfigError(f"stage_channels must double stage to stage, got {ch}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must be >= 1, got {self.stage_depths}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for s, (side, dim, heads) in enumerate(zip(self.stage_sides(), self.token_dims(), self.stage_heads)):
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage_heads[{s}]={heads} does not divide token dim p^2*C={dim}")
            for name, size in (("p", self.p), ("hv", self.hv)):
                if size < 1 or side % size:
                    raise ConfigError(f"{name}={size} does not divide the stage-{s + 1} map side {side}")
        if self.hv % self.p and self.p % self.hv:
            raise ConfigError(f"p={self.p} and hv={self.hv} are not aligned (neither divides the other)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class HoverTransNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.stage_channels
        self.stem = ConvStem(c[0])
        sides = config.stage_sides()
        self.stages = nn.ModuleList(
            HoverStage(
                side=sides[s],
                channels=c[s],
                depth=config.stage_depths[s],
                heads=config.stage_heads[s],
                p=config.p,
                hv=config.hv,
                variant=config.variant,
                positional=config.positional,
                pool=config.final_pool or s < 3,
            )
            for s in range(4)
        )
        self.head = nn.Linear(2 * c[3], config.num_classes)

    def forward_features(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
        """Return the final map, every stage output, and every pre-pool Conv-block output."""
        side = self.config.input_side
        if x.ndim != 4 or x.shape[1:] != (side, side, 3):
            raise ValidationError(f"expected input of shape (B, {side}, {side}, 3), got {tuple(x.shape)}")
        z = self.stem(x)
        outs, fused = [z], []
        for stage in self.stages:
            z, f = stage(z, return_fused=True)
            outs.append(z)
            fused.append(f)
        return z, outs, fused

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z, _, _ = self.forward_features(x)
        return self.head(z.mean(dim=(1, 2)))


def init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        pos = getattr(m, "pos", None)
        if isinstance(pos, nn.Parameter):
            nn.init.trunc_normal_(pos, std=0.02)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> HoverTransNet:
    config.validate()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = HoverTransNet(config)
        init_weights(model)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def loss_fn(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValidationError(f"labels must lie in [0, {n}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: HoverTransNet, meta: dict[str, Any] | None = None) -> None:
    """Write config, parameters and metadata as a single torch archive.

    Layout: ``{"format", "version", "config", "state_dict", "meta"}``, with
    ``config`` a plain dict and ``meta`` JSON-serializable.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": json.loads(json.dumps(meta or {})),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[HoverTransNet, dict[str, Any]]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValidationError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a hovertrans checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = ModelConfig.from_dict(payload["config"])
    state = payload["state_dict"]
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model = HoverTransNet(config).to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, payload["meta"]
