"""Training loop, warm-up + cosine schedule, k-fold orchestration, score tables."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import AugmentConfig, FoldSplit, ImageRecord, augment, resize_image, sample_rng, to_model_input
from .errors import TrainingError, ValidationError
from .metrics import MetricsReport, fold_report, aggregate
from .model import HoverTransNet, ModelConfig, build_model, loss_fn, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 32
    base_lr: float = 1e-4
    weight_decay: float = 0.1
    warmup_epochs: int = 10
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_batch_size: int = 64
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError(f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ValidationError("base_lr must be > 0 and weight_decay >= 0")


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warm-up from 0 to ``base_lr``, then half-cosine decay to 0 at the last step."""
    if step < 0:
        raise ValidationError(f"step must be >= 0, got {step}")
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.base_lr * step / warm
    progress = min((step - warm) / (total - warm), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled decay on weight matrices only (no norms, no biases)."""
    decay, no_decay = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        # every norm scale/shift and bias is 1-D; weights and positional tables are not
        if p.ndim <= 1:
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=0.0, betas=config.betas, eps=config.eps)


@contextlib.contextmanager
def deterministic_mode(threads: int = 1):
    """Single-threaded, deterministic kernels for bit-reproducible runs."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def _prepared(records: Sequence[ImageRecord], side: int) -> list[np.ndarray]:
    return [r.image if r.image.shape[:2] == (side, side) else resize_image(r.image, side) for r in records]


def _batch_tensor(images: Sequence[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(to_model_input(images)).to(dtype)


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Index batches; a trailing batch of one is merged into its predecessor (BatchNorm needs >1 sample)."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


@torch.no_grad()
def predict(model: HoverTransNet, records: Sequence[ImageRecord], batch_size: int = 64) -> np.ndarray:
    """Softmax probability of the malignant class for each record."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    images = _prepared(records, model.config.input_side)
    out = []
    for idx in batches(len(images), batch_size):
        logits = model(_batch_tensor([images[i] for i in idx], dtype))
        out.append(torch.softmax(logits, dim=-1)[:, 1].double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class FoldResult:
    model: HoverTransNet
    scores: dict[str, float]
    history: list[dict]


def train_fold(
    model: HoverTransNet,
    train_records: Sequence[ImageRecord],
    val_records: Sequence[ImageRecord],
    config: TrainConfig,
    log_path: str | Path | None = None,
    on_batch: Callable[[int, list[str]], None] | None = None,
) -> FoldResult:
    """Train ``model`` in place on ``train_records`` and score ``val_records``.

    Batches are reshuffled every epoch from ``(seed, epoch)``; each image is
    augmented with a stream derived from ``(seed, epoch, image_id)``. The
    final-epoch weights are kept. ``on_batch(step, image_ids)`` is called
    with every training batch (useful for leakage audits).
    """
    train_ids = {r.image_id for r in train_records}
    overlap = train_ids & {r.image_id for r in val_records}
    if overlap:
        raise ValidationError(f"train and validation sets share {len(overlap)} image ids, e.g. {sorted(overlap)[0]}")
    if len(train_records) < 2:
        raise ValidationError("need at least 2 training images")

    side = model.config.input_side
    dtype = next(model.parameters()).dtype
    images = _prepared(train_records, side)
    labels = np.array([r.label for r in train_records])
    ids = [r.image_id for r in train_records]

    opt = make_optimizer(model, config)
    steps_per_epoch = len(batches(len(images), config.batch_size))
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            model.train()
            order_rng = np.random.default_rng([config.seed, epoch])
            total, count = 0.0, 0
            lr = 0.0
            for idx in batches(len(images), config.batch_size, order_rng):
                batch_ids = [ids[i] for i in idx]
                if on_batch is not None:
                    on_batch(step, batch_ids)
                aug = [augment(images[i], config.augment, sample_rng(config.seed, epoch, ids[i])) for i in idx]
                x = _batch_tensor(aug, dtype)
                y = torch.as_tensor(labels[idx], dtype=torch.long)
                lr = lr_at(step, steps_per_epoch, config)
                for g in opt.param_groups:
                    g["lr"] = lr
                loss = loss_fn(model(x), y)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()} at step {step} (epoch {epoch})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
                step += 1
            record = {"epoch": epoch, "lr": lr, "train_loss": total / count, "val_loss": None}
            if val_records:
                record["val_loss"] = evaluate_loss(model, val_records, config.eval_batch_size)
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()

    model.eval()
    probs = predict(model, val_records, config.eval_batch_size) if val_records else np.zeros(0)
    scores = {r.image_id: float(p) for r, p in zip(val_records, probs)}
    return FoldResult(model, scores, history)


@torch.no_grad()
def evaluate_loss(model: HoverTransNet, records: Sequence[ImageRecord], batch_size: int = 64) -> float:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    images = _prepared(records, model.config.input_side)
    labels = np.array([r.label for r in records])
    total = 0.0
    for idx in batches(len(images), batch_size):
        logits = model(_batch_tensor([images[i] for i in idx], dtype))
        total += loss_fn(logits, torch.as_tensor(labels[idx])).item() * len(idx)
    model.train(was_training)
    return total / len(records)


def accuracy(model: HoverTransNet, records: Sequence[ImageRecord], threshold: float = 0.5) -> float:
    probs = predict(model, records)
    labels = np.array([r.label for r in records])
    return float(((probs >= threshold).astype(int) == labels).mean())


# ---------------------------------------------------------------------------
# score tables


@dataclass
class ScoreRow:
    image_id: str
    fold: int
    score_malignant: float
    label: int


def write_scores(path: str | Path, rows: Sequence[ScoreRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "fold", "score_malignant", "label"])
        for r in rows:
            w.writerow([r.image_id, r.fold, repr(float(r.score_malignant)), r.label])


def read_scores(path: str | Path) -> list[ScoreRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["image_id", "fold", "score_malignant", "label"]:
            raise ValidationError(f"{path}: score table header must be image_id,fold,score_malignant,label")
        rows = []
        for lineno, r in enumerate(reader, start=2):
            try:
                rows.append(ScoreRow(r["image_id"], int(r["fold"]), float(r["score_malignant"]), int(r["label"])))
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    ids = [r.image_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate image_id in score table")
    return rows


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    rows: list[ScoreRow]
    report: MetricsReport
    checkpoints: list[Path] = field(default_factory=list)


def cross_validate(
    records: Sequence[ImageRecord],
    split: FoldSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    folds: Sequence[int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> CVResult:
    """Train one model per fold and collect out-of-fold scores.

    Fold ``f`` trains on every other fold and scores fold ``f``. With
    ``out_dir`` set, each fold writes ``fold{f}.ckpt``, ``fold{f}.log.jsonl``
    and the combined ``scores.csv``.
    """
    by_id = {r.image_id: r for r in records}
    missing = set(by_id) ^ set(split.assignments)
    if missing:
        raise ValidationError(f"fold split and records disagree on {len(missing)} image ids, e.g. {sorted(missing)[0]}")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[ScoreRow] = []
    checkpoints = []
    fold_list = list(range(split.k)) if folds is None else list(folds)
    for f in fold_list:
        val = [r for r in records if split.assignments[r.image_id] == f]
        train = [r for r in records if split.assignments[r.image_id] != f]
        model = build_model(model_config, seed=train_config.seed + f, dtype=dtype)
        log.info("fold %d: %d train / %d val", f, len(train), len(val))
        result = train_fold(
            model, train, val, train_config,
            log_path=out / f"fold{f}.log.jsonl" if out else None,
        )
        rows.extend(ScoreRow(r.image_id, f, result.scores[r.image_id], r.label) for r in val)
        if out:
            ckpt = out / f"fold{f}.ckpt"
            save_checkpoint(ckpt, model, {"fold": f, "epochs": train_config.epochs, "seed": train_config.seed,
                                         "final_train_loss": result.history[-1]["train_loss"]})
            checkpoints.append(ckpt)
    order = {r.image_id: i for i, r in enumerate(records)}
    rows.sort(key=lambda r: order[r.image_id])
    if out:
        write_scores(out / "scores.csv", rows)
    report = aggregate([fold_report(rows, f, train_config.threshold) for f in fold_list], train_config.threshold)
    return CVResult(rows, report, checkpoints)
