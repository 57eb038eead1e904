"""Dataset ingestion, preprocessing, fold splitting and augmentation.

Images are handled as ``uint8`` numpy arrays, either ``(H, W)`` grayscale or
``(H, W, 3)``. Every random operation takes an explicit
:class:`numpy.random.Generator`; use :func:`sample_rng` to derive an
independent stream per image so that workers can run in any order.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import IngestionError, ValidationError

log = logging.getLogger(__name__)

LABELS = {"benign": 0, "malignant": 1}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
BIRADS_VALUES = ("2", "3", "4A", "4B", "4C", "5")
MIN_SIDE = 32

# Fixed per-channel standardization applied after scaling to [0, 1].
NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass
class ImageRecord:
    image_id: str
    image: np.ndarray
    label: int
    patient_id: str | None = None
    birads: str | None = None
    center: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"{self.image_id}: label must be 0 or 1, got {self.label!r}")
        if self.image.ndim not in (2, 3) or self.image.shape[0] < MIN_SIDE or self.image.shape[1] < MIN_SIDE:
            raise ValidationError(
                f"{self.image_id}: image must be at least {MIN_SIDE}x{MIN_SIDE}, got shape {self.image.shape}"
            )
        if self.birads is not None and self.birads not in BIRADS_VALUES:
            raise ValidationError(f"{self.image_id}: unknown BI-RADS category {self.birads!r}")


@dataclass
class FoldSplit:
    k: int
    assignments: dict[str, int] = field(default_factory=dict)

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "fold"])
            for image_id, fold in self.assignments.items():
                w.writerow([image_id, fold])

    @classmethod
    def read_csv(cls, path: str | Path) -> "FoldSplit":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"image_id", "fold"}:
            raise ValidationError(f"{path}: fold file must have header image_id,fold")
        assignments = {r["image_id"]: int(r["fold"]) for r in rows}
        return cls(k=max(assignments.values()) + 1, assignments=assignments)


@dataclass
class AugmentConfig:
    """Per-transform probabilities and magnitudes.

    There is deliberately no vertical flip: the order of tissue layers from
    top to bottom carries the diagnostic signal.
    """

    p_blur: float = 0.2
    p_noise: float = 0.2
    p_hflip: float = 0.5
    p_brightness_contrast: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.5)
    noise_sigma: float = 5.0
    brightness_delta: float = 0.2
    contrast_delta: float = 0.2

    def __post_init__(self):
        for name in ("p_blur", "p_noise", "p_hflip", "p_brightness_contrast"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {p}")
        if self.noise_sigma < 0 or self.brightness_delta < 0 or self.contrast_delta < 0:
            raise ValidationError("augmentation magnitudes must be non-negative")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(p_blur=0.0, p_noise=0.0, p_hflip=0.0, p_brightness_contrast=0.0)


# ---------------------------------------------------------------------------
# ingestion


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image)).save(path, format="PNG")


def parse_label(value: str) -> int:
    try:
        return LABELS[value.strip().lower()]
    except KeyError:
        raise ValidationError(f"unknown label {value!r}; expected benign or malignant") from None


def load_manifest(manifest_path: str | Path, image_root: str | Path) -> list[ImageRecord]:
    """Read a manifest CSV (``image_path,label[,patient_id][,birads][,center]``).

    The image id is the manifest's ``image_path`` value. Empty optional
    cells are read as missing.
    """
    manifest_path = Path(manifest_path)
    image_root = Path(image_root)
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if header[:2] != ["image_path", "label"]:
            raise ValidationError(f"{manifest_path}: header must start with image_path,label; got {header}")
        extra = set(header[2:]) - {"patient_id", "birads", "center"}
        if extra:
            raise ValidationError(f"{manifest_path}: unknown columns {sorted(extra)}")
        rows = list(reader)

    records: list[ImageRecord] = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows, start=2):
        image_id = row["image_path"]
        if image_id in seen:
            raise ValidationError(f"{manifest_path}:{lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        try:
            label = parse_label(row["label"])
        except ValidationError as exc:
            raise ValidationError(f"{manifest_path}:{lineno}: {exc}") from None
        path = image_root / image_id
        if not path.is_file():
            raise IngestionError(f"{manifest_path}:{lineno}: image file not found: {path}")
        try:
            image = read_image(path)
        except Exception as exc:  # PIL raises a zoo of exception types
            raise IngestionError(f"{manifest_path}:{lineno}: cannot decode {path}: {exc}") from exc
        birads = (row.get("birads") or "").strip().upper() or None
        records.append(
            ImageRecord(
                image_id=image_id,
                image=image,
                label=label,
                patient_id=(row.get("patient_id") or "").strip() or None,
                birads=birads,
                center=(row.get("center") or "").strip() or None,
            )
        )
    return records


def write_manifest(path: str | Path, records: Sequence[ImageRecord]) -> None:
    cols = ["image_path", "label"]
    for opt in ("patient_id", "birads", "center"):
        if any(getattr(r, opt) is not None for r in records):
            cols.append(opt)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = [r.image_id, LABEL_NAMES[r.label]]
            row += [getattr(r, c) or "" for c in cols[2:]]
            w.writerow(row)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class ForegroundResult:
    image: np.ndarray
    box: tuple[int, int, int, int] | None  # x, y, width, height
    confidence: float
    fallback: bool


def _to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[..., 0]
    return cv2.cvtColor(image, cv2.COLOR_RGB2GRAY)


def _boundary_coverage(mask: np.ndarray, x: int, y: int, w: int, h: int) -> float:
    """Fraction of the rectangle outline lying on foreground pixels (1px tolerance)."""
    near = cv2.dilate(mask, np.ones((3, 3), np.uint8)) > 0
    top, bottom = near[y, x : x + w], near[y + h - 1, x : x + w]
    left, right = near[y : y + h, x], near[y : y + h, x + w - 1]
    hits = top.sum() + bottom.sum() + left.sum() + right.sum()
    return float(hits) / float(2 * w + 2 * h)


def extract_foreground(image: np.ndarray, min_confidence: float = 0.8) -> ForegroundResult:
    """Crop ``image`` to its largest bright axis-aligned rectangle.

    The image is binarized with Otsu's threshold and the outer contours of
    the bright regions are scanned. Each candidate is scored by how much of
    its bounding rectangle's outline is actually foreground; the largest
    candidate scoring at least ``min_confidence`` wins and the crop includes
    its boundary pixels. Without such a candidate the input comes back
    unchanged with ``fallback=True``.
    """
    gray = _to_gray(image)
    if int(gray.max()) == int(gray.min()):
        return ForegroundResult(image, None, 0.0, True)
    _, mask = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)

    best = None
    for contour in contours:
        x, y, w, h = cv2.boundingRect(contour)
        if w < MIN_SIDE or h < MIN_SIDE:
            continue
        conf = _boundary_coverage(mask, x, y, w, h)
        if conf < min_confidence:
            continue
        if best is None or w * h > best[2] * best[3]:
            best = (x, y, w, h, conf)
    if best is None:
        return ForegroundResult(image, None, 0.0, True)
    x, y, w, h, conf = best
    return ForegroundResult(image[y : y + h, x : x + w].copy(), (x, y, w, h), conf, False)


def resize_image(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to ``side x side``; channel count is preserved."""
    if side < MIN_SIDE:
        raise ValidationError(f"side must be >= {MIN_SIDE}, got {side}")
    if image.shape[0] == side and image.shape[1] == side:
        return image.copy()
    out = cv2.resize(image, (side, side), interpolation=cv2.INTER_LINEAR)
    if image.ndim == 3 and out.ndim == 2:
        out = out[..., None]
    return out


def preprocess(image: np.ndarray, side: int, crop: bool = True) -> np.ndarray:
    if crop:
        image = extract_foreground(image).image
    return resize_image(image, side)


def to_model_input(images: Iterable[np.ndarray]) -> np.ndarray:
    """Stack uint8 rasters into a float32 ``(B, H, W, 3)`` standardized batch."""
    batch = []
    for img in images:
        if img.ndim == 2:
            img = img[..., None]
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        batch.append(img)
    x = np.stack(batch).astype(np.float32) / 255.0
    return (x - NORM_MEAN) / NORM_STD


# ---------------------------------------------------------------------------
# folds


def _check_class_counts(labels: np.ndarray, k: int) -> None:
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    for cls in (0, 1):
        n = int((labels == cls).sum())
        if n < k:
            raise ValidationError(f"class {LABEL_NAMES[cls]} has {n} samples, need at least k={k}")


def make_folds(records: Sequence[ImageRecord], k: int, seed: int) -> FoldSplit:
    """Stratified k-fold assignment, grouped by patient when ids are present.

    Without patient ids the images of each class are shuffled and dealt
    round-robin, which balances fold sizes to within one image. With patient
    ids, whole patients are placed greedily (largest first) into the fold
    that most needs their class mix.
    """
    labels = np.array([r.label for r in records])
    _check_class_counts(labels, k)
    rng = np.random.default_rng(seed)
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate image_id in records")

    if all(r.patient_id is None for r in records):
        order = []
        for cls in (0, 1):
            idx = np.flatnonzero(labels == cls)
            order.extend(rng.permutation(idx).tolist())
        assignments = {ids[i]: pos % k for pos, i in enumerate(order)}
        return FoldSplit(k, {i: assignments[i] for i in ids})

    # images without a patient id form their own singleton group
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.patient_id if r.patient_id is not None else f"\0{r.image_id}", []).append(i)
    keys = list(groups)
    keys = [keys[j] for j in rng.permutation(len(keys))]
    keys.sort(key=lambda g: -len(groups[g]))  # stable: ties keep shuffled order

    totals = np.array([(labels == 0).sum(), (labels == 1).sum()], dtype=float)
    target = totals / k
    counts = np.zeros((k, 2))
    fold_of_group: dict[str, int] = {}
    for g in keys:
        members = groups[g]
        add = np.array([(labels[members] == 0).sum(), (labels[members] == 1).sum()], dtype=float)
        cost = [np.abs(counts[f] + add - target).sum() - np.abs(counts[f] - target).sum() for f in range(k)]
        f = int(np.argmin(cost))
        counts[f] += add
        fold_of_group[g] = f
    assignments = {}
    for g, members in groups.items():
        for i in members:
            assignments[ids[i]] = fold_of_group[g]
    return FoldSplit(k, {i: assignments[i] for i in ids})


# ---------------------------------------------------------------------------
# augmentation


def sample_rng(seed: int, *keys: object) -> np.random.Generator:
    """Independent stream derived from a global seed and identifying keys."""
    digest = hashlib.sha256("\x1f".join(str(k) for k in keys).encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed, *words]))


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply blur, noise, horizontal flip and brightness/contrast independently.

    One uniform draw is consumed per transform regardless of outcome, so the
    stream position does not depend on which transforms fired.
    """
    u = rng.random(4)
    out = image
    if u[0] < config.p_blur:
        sigma = rng.uniform(*config.blur_sigma)
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT)
        if image.ndim == 3 and out.ndim == 2:
            out = out[..., None]
    if u[1] < config.p_noise:
        noisy = out.astype(np.float64) + rng.normal(0.0, config.noise_sigma, size=out.shape)
        out = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    if u[2] < config.p_hflip:
        out = out[:, ::-1]
    if u[3] < config.p_brightness_contrast:
        gain = 1.0 + rng.uniform(-config.contrast_delta, config.contrast_delta)
        shift = 255.0 * rng.uniform(-config.brightness_delta, config.brightness_delta)
        mean = out.mean()
        adj = (out.astype(np.float64) - mean) * gain + mean + shift
        out = np.clip(np.rint(adj), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(out) if out is not image else image.copy()
