"""Synthetic layered images with lesions, for desk-scale experiments.

Each image has four horizontal tissue bands separated by thin bright
interfaces. A dark lesion sits in the second band. In benign images it is a
flat ellipse that leaves every interface intact; in malignant images it is a
tall irregular mass that breaks through the interfaces above and below it.
The label is therefore a statement about layer continuity, which is the
structure the strip branches are meant to capture.
"""

from __future__ import annotations

import numpy as np

from .data import ImageRecord

BAND_LEVELS = (150, 95, 125, 60)


def _layer_image(side: int, rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    yy = np.arange(side)[:, None].astype(float)
    xx = np.arange(side)[None, :].astype(float)
    # interface heights, wavy across the width
    base = np.array([0.22, 0.48, 0.72]) * side + rng.normal(0, 0.02 * side, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    amp = rng.uniform(0.0, 0.03 * side, 3)
    bounds = [b + a * np.sin(2 * np.pi * xx[0] / side + ph) for b, a, ph in zip(base, amp, phase)]

    img = np.full((side, side), float(BAND_LEVELS[-1]))
    for level, b in zip(BAND_LEVELS[:-1][::-1], bounds[::-1]):
        img = np.where(yy < b[None, :], float(level), img)
    for b in bounds:
        img += 70.0 * np.exp(-0.5 * ((yy - b[None, :]) / (0.012 * side + 0.4)) ** 2)
    return img, bounds


def make_image(side: int, label: int, rng: np.random.Generator) -> np.ndarray:
    img, bounds = _layer_image(side, rng)
    yy = np.arange(side)[:, None].astype(float)
    xx = np.arange(side)[None, :].astype(float)
    cx = rng.uniform(0.3, 0.7) * side
    top, bottom = bounds[0][int(cx)], bounds[1][int(cx)]
    cy = 0.5 * (top + bottom)
    if label == 0:
        # stays inside the band: half-height below the band half-thickness
        ry = 0.35 * (bottom - top)
        rx = rng.uniform(1.6, 2.4) * ry
        r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
        mask = r < 1.0
    else:
        ry = rng.uniform(0.75, 1.0) * (bottom - top)
        rx = rng.uniform(0.5, 0.8) * ry
        theta = np.arctan2(yy - cy, xx - cx)
        wobble = 1.0 + 0.15 * np.sin(5 * theta + rng.uniform(0, 2 * np.pi))
        r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) / wobble
        mask = r < 1.0
    img = np.where(mask, 25.0, img)
    img += rng.normal(0.0, 10.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_dataset(
    n: int,
    side: int = 32,
    seed: int = 0,
    malignant_fraction: float = 0.5,
    images_per_patient: int = 1,
) -> list[ImageRecord]:
    """Generate ``n`` labelled records with BI-RADS categories that track the label."""
    rng = np.random.default_rng(seed)
    n_mal = int(round(n * malignant_fraction))
    labels = np.array([1] * n_mal + [0] * (n - n_mal))
    rng.shuffle(labels)
    records = []
    for i, label in enumerate(labels.tolist()):
        birads = rng.choice(["4B", "4C", "5"]) if label else rng.choice(["2", "3", "4A"])
        records.append(
            ImageRecord(
                image_id=f"synth_{i:05d}.png",
                image=make_image(side, label, rng),
                label=label,
                patient_id=f"P{i // images_per_patient:05d}" if images_per_patient > 1 else None,
                birads=str(birads),
                center="synthetic",
            )
        )
    return records
