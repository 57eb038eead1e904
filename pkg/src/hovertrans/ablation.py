"""Variant and embedding-size sweeps at desk scale."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .data import ImageRecord, make_folds
from .errors import ConfigError
from .hover import VARIANTS
from .model import ModelConfig
from .train import TrainConfig, cross_validate

log = logging.getLogger(__name__)

GRID_P = (2, 4, 8)
GRID_HV = (1, 2, 4)


@dataclass
class Cell:
    name: str
    config: ModelConfig | None
    skipped: str | None = None


def variant_cells(base: ModelConfig, variants: Sequence[str] = VARIANTS) -> list[Cell]:
    return [Cell(v, dataclasses.replace(base, variant=v)) for v in variants]


def grid_cells(base: ModelConfig, ps: Sequence[int] = GRID_P, hvs: Sequence[int] = GRID_HV) -> list[Cell]:
    """One cell per ``(p, hv)``; illegal geometries carry the reason instead of a config."""
    cells = []
    for p in ps:
        for hv in hvs:
            name = f"p{p}_hv{hv}"
            try:
                cells.append(Cell(name, dataclasses.replace(base, p=p, hv=hv)))
            except ConfigError as exc:
                cells.append(Cell(name, None, skipped=str(exc)))
    return cells


def desk_model_config(input_side: int = 128) -> ModelConfig:
    """Small model for sweeps; ``input_side=128`` keeps p in {2, 4} legal at every stage."""
    return ModelConfig(
        input_side=input_side, p=2, hv=2,
        stage_channels=[2, 4, 8, 16], stage_depths=[1, 1, 1, 1], stage_heads=[1, 2, 2, 4],
    )


def run_cells(
    cells: Sequence[Cell],
    records: Sequence[ImageRecord],
    k: int,
    train_config: TrainConfig,
    out_dir: str | Path,
) -> dict:
    """Cross-validate every legal cell; write ``<cell>/report.json`` and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = make_folds(records, k, train_config.seed)
    summary = {}
    for cell in cells:
        if cell.config is None:
            log.info("skipping %s: %s", cell.name, cell.skipped)
            summary[cell.name] = {"status": "skipped", "reason": cell.skipped}
            continue
        log.info("running %s", cell.name)
        result = cross_validate(records, split, cell.config, train_config, out / cell.name)
        (out / cell.name / "report.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
        summary[cell.name] = {
            "status": "ok",
            "config": cell.config.to_dict(),
            "auc": dataclasses.asdict(result.report.aggregate["auc"]),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
