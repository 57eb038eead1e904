"""Feature-map heatmaps and image overlays.

The default evidence map is the stage-4 Conv-block output before pooling:
the channel mean of absolute activations, min-max normalized and bilinearly
upsampled to the input size. ``method="gradcam"`` weights channels by the
pooled gradient of the malignant logit instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import to_model_input, write_png
from .errors import ValidationError
from .model import HoverTransNet

METHODS = ("activation", "gradcam")


def _jet_lut() -> np.ndarray:
    """Fixed 256-entry jet-style colormap, ``uint8`` of shape (256, 3)."""
    x = np.linspace(0.0, 1.0, 256)
    r = np.clip(1.5 - np.abs(4.0 * x - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * x - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * x - 1.0), 0.0, 1.0)
    return np.rint(np.stack([r, g, b], axis=1) * 255.0).astype(np.uint8)


COLORMAP = _jet_lut()


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) float64 in [0, 1]
    constant: bool = False


def normalize(raw: np.ndarray) -> Heatmap:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return Heatmap(np.full(raw.shape, 0.5), constant=True)
    return Heatmap((raw - lo) / (hi - lo))


def heatmap_from_map(raw: np.ndarray, side: int) -> Heatmap:
    """Normalize a 2-D evidence map and upsample it bilinearly to ``side x side``."""
    hm = normalize(raw)
    if hm.constant:
        return Heatmap(np.full((side, side), 0.5), constant=True)
    t = torch.from_numpy(hm.values)[None, None]
    up = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)[0, 0].numpy()
    # renormalize: bilinear resampling can shrink the extremes slightly
    return Heatmap(normalize(up).values)


def heatmap(model: HoverTransNet, image: np.ndarray, method: str = "activation") -> Heatmap:
    """Evidence heatmap for one preprocessed ``uint8`` image at the model's input size."""
    if method not in METHODS:
        raise ValidationError(f"unknown heatmap method {method!r}; expected one of {METHODS}")
    side = model.config.input_side
    if image.shape[:2] != (side, side):
        raise ValidationError(f"image must be {side}x{side}, got {image.shape[:2]}")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(to_model_input([image])).to(dtype)
    try:
        if method == "activation":
            with torch.no_grad():
                _, _, fused = model.forward_features(x)
            raw = fused[-1][0].abs().mean(dim=-1)
        else:
            z, _, fused = model.forward_features(x)
            act = fused[-1]
            act.retain_grad()
            logits = model.head(z.mean(dim=(1, 2)))
            model.zero_grad(set_to_none=True)
            logits[0, 1].backward()
            weights = act.grad[0].mean(dim=(0, 1))
            raw = F.relu((act[0] * weights).sum(dim=-1)).detach()
    finally:
        model.train(was_training)
    return heatmap_from_map(raw.double().numpy(), side)


def to_rgb(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return np.repeat(image[..., None], 3, axis=2)
    if image.shape[2] == 1:
        return np.repeat(image, 3, axis=2)
    return image


def colorize(hm: Heatmap) -> np.ndarray:
    idx = np.clip(np.rint(hm.values * 255.0), 0, 255).astype(np.intp)
    return COLORMAP[idx]


def overlay(image: np.ndarray, hm: Heatmap, alpha: float = 0.4) -> np.ndarray:
    """Blend ``(1 - alpha) * image + alpha * colormap(heatmap)`` into a ``uint8`` RGB raster."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    if image.shape[:2] != hm.values.shape:
        raise ValidationError(f"image {image.shape[:2]} and heatmap {hm.values.shape} shapes differ")
    base = to_rgb(image).astype(np.float64)
    out = (1.0 - alpha) * base + alpha * colorize(hm).astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def write_overlay(
    out_dir: str | Path,
    image_id: str,
    image: np.ndarray,
    hm: Heatmap,
    alpha: float,
    checkpoint_id: str,
    method: str,
) -> Path:
    """Write ``<stem>_heatmap.png`` plus a JSON sidecar; returns the PNG path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_id).with_suffix("").as_posix().replace("/", "__")
    png = out_dir / f"{stem}_heatmap.png"
    write_png(png, overlay(image, hm, alpha))
    sidecar = {"image_id": image_id, "checkpoint_id": checkpoint_id, "method": method, "alpha": alpha,
               "constant": hm.constant}
    png.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return png
