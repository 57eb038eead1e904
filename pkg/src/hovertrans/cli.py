"""Command-line interface: prepare, synth, split, train, eval, heatmap, ablate, delong.

Exit status is 0 on success, 1 for validation errors (bad config, bad
inputs) and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, schema_help
from .errors import HoverError, ValidationError

log = logging.getLogger("hovertrans")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="hovertrans",
        description=__doc__.splitlines()[0],
        epilog=schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="crop foregrounds, resize, write PNGs and a clean manifest")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--image-root")
    p.add_argument("--out-dir")
    p.add_argument("--no-crop", action="store_true", help="skip foreground extraction")

    p = sub.add_parser("synth", help="write a synthetic layered-lesion dataset")
    _common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images-per-patient", type=int, default=1)

    p = sub.add_parser("split", help="stratified k-fold assignment -> fold CSV")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--image-root")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="fold CSV to write")

    p = sub.add_parser("train", help="cross-validated training -> checkpoints, scores.csv, logs")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--image-root")
    p.add_argument("--folds")
    p.add_argument("--out-dir")
    p.add_argument("--fold", type=int, action="append", help="train only these folds (repeatable)")

    p = sub.add_parser("eval", help="metrics report from a score table")
    _common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", help="manifest with a birads column, for subgroups")
    p.add_argument("--birads-subgroups", action="store_true")
    p.add_argument("--compare", action="append", default=[], metavar="SCORES", help="DeLong test against another score table")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="write the JSON report here (table goes to stdout)")

    p = sub.add_parser("heatmap", help="render heatmap overlays from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--image-root")
    p.add_argument("--out-dir")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--method", choices=("activation", "gradcam"), default="activation")
    p.add_argument("--id", action="append", dest="ids", help="only these image ids (repeatable)")
    p.add_argument("--no-crop", action="store_true")

    p = sub.add_parser("ablate", help="variant set and/or (p, hv) grid at desk scale")
    _common(p)
    p.add_argument("--variants", action="store_true", help="run full, model_p, model_p_v, model_p_h")
    p.add_argument("--grid", action="store_true", help="run (p, hv) in {2,4,8} x {1,2,4}")
    p.add_argument("--out-dir")
    p.add_argument("--n", type=int, default=64, help="synthetic images when no manifest is given")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--manifest")
    p.add_argument("--image-root")

    p = sub.add_parser("delong", help="DeLong test between two score tables")
    _common(p)
    p.add_argument("scores_a")
    p.add_argument("scores_b")
    p.add_argument("--out")
    return parser


def _cfg(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set)
    for key in ("manifest", "image_root", "folds", "out_dir", "k", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            cfg.values[key] = val
            cfg.explicit.add(key)
    return cfg


def _runtime(cfg: RunConfig):
    from .train import deterministic_mode

    return deterministic_mode() if cfg["deterministic"] else contextlib.nullcontext()


def _records(cfg: RunConfig):
    from .data import load_manifest

    cfg.require("manifest", "image_root")
    return load_manifest(cfg["manifest"], cfg["image_root"])


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> None:
    from .data import extract_foreground, resize_image, write_manifest, write_png

    cfg = _cfg(args)
    cfg.require("out_dir")
    records = _records(cfg)
    out = Path(cfg["out_dir"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    side = cfg["input_side"]
    with open(out / "prepare_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "fallback", "confidence", "box"])
        for r in records:
            image = r.image
            if not args.no_crop:
                fg = extract_foreground(image)
                image = fg.image
                w.writerow([r.image_id, int(fg.fallback), f"{fg.confidence:.4f}", "" if fg.box is None else " ".join(map(str, fg.box))])
            r.image = resize_image(image, side)
            new_id = str(Path(r.image_id).with_suffix(".png"))
            dest = out / "images" / new_id
            dest.parent.mkdir(parents=True, exist_ok=True)
            write_png(dest, r.image)
            r.image_id = new_id
    write_manifest(out / "manifest.csv", records)
    print(f"prepared {len(records)} images -> {out / 'manifest.csv'} (image root {out / 'images'})")


def cmd_synth(args) -> None:
    from .data import write_manifest, write_png
    from .synthetic import make_dataset

    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = make_dataset(args.n, side=args.side, seed=args.seed, images_per_patient=args.images_per_patient)
    for r in records:
        write_png(out / "images" / r.image_id, r.image)
    write_manifest(out / "manifest.csv", records)
    print(f"wrote {len(records)} synthetic images -> {out / 'manifest.csv'}")


def cmd_split(args) -> None:
    from .data import make_folds

    cfg = _cfg(args)
    split = make_folds(_records(cfg), cfg["k"], cfg["seed"])
    split.write_csv(args.out)
    print(f"wrote {split.k}-fold split of {len(split.assignments)} images -> {args.out}")


def cmd_train(args) -> None:
    from .data import FoldSplit, make_folds
    from .train import cross_validate

    cfg = _cfg(args)
    cfg.require("out_dir")
    records = _records(cfg)
    split = FoldSplit.read_csv(cfg["folds"]) if cfg["folds"] else make_folds(records, cfg["k"], cfg["seed"])
    model_config, train_config = cfg.model_config(), cfg.train_config()
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dumps(), encoding="utf-8")
    with _runtime(cfg):
        result = cross_validate(records, split, model_config, train_config, out, folds=args.fold)
    (out / "report.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
    print(result.report.to_table())


def _birads_by_id(manifest: str) -> dict[str, str | None]:
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "birads" not in rows[0]:
        raise ValidationError(f"{manifest}: no birads column for subgroup analysis")
    return {r["image_path"]: (r.get("birads") or "").strip().upper() or None for r in rows}


def _paired(rows_a, rows_b, name_b: str):
    a = {r.image_id: r for r in rows_a}
    b = {r.image_id: r for r in rows_b}
    if set(a) != set(b):
        raise ValidationError(f"score tables cover different image ids ({len(set(a) ^ set(b))} differ), vs {name_b}")
    ids = [r.image_id for r in rows_a]
    for i in ids:
        if a[i].label != b[i].label:
            raise ValidationError(f"label mismatch for {i} between score tables")
    return ([a[i].score_malignant for i in ids], [b[i].score_malignant for i in ids], [a[i].label for i in ids])


def cmd_eval(args) -> None:
    from .metrics import delong_test, report_from_scores, subgroup_reports
    from .train import read_scores

    cfg = _cfg(args)
    threshold = args.threshold if args.threshold is not None else cfg["threshold"]
    rows = read_scores(args.scores)
    report = report_from_scores(rows, threshold)
    for other in args.compare:
        sa, sb, labels = _paired(rows, read_scores(other), other)
        report.delong[Path(other).stem if Path(other).stem != "scores" else other] = delong_test(sa, sb, labels)
    if args.birads_subgroups:
        if not args.manifest:
            raise ValidationError("--birads-subgroups needs --manifest")
        report.subgroups = subgroup_reports(rows, _birads_by_id(args.manifest), threshold)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table())


def cmd_heatmap(args) -> None:
    from .data import preprocess
    from .interpret import heatmap, write_overlay
    from .model import load_checkpoint

    cfg = _cfg(args)
    cfg.require("out_dir")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    records = _records(cfg)
    if args.ids:
        wanted = set(args.ids)
        records = [r for r in records if r.image_id in wanted]
        if len(records) != len(wanted):
            raise ValidationError(f"image ids not in manifest: {sorted(wanted - {r.image_id for r in records})}")
    checkpoint_id = f"{ckpt.name}:{_sha(ckpt)}"
    with _runtime(cfg):
        for r in records:
            image = preprocess(r.image, model.config.input_side, crop=not args.no_crop)
            hm = heatmap(model, image, args.method)
            path = write_overlay(cfg["out_dir"], r.image_id, image, hm, args.alpha, checkpoint_id, args.method)
            print(path)


def cmd_ablate(args) -> None:
    from .ablation import desk_model_config, grid_cells, run_cells, variant_cells
    from .synthetic import make_dataset

    cfg = _cfg(args)
    cfg.require("out_dir")
    if not (args.variants or args.grid):
        raise ValidationError("choose --variants and/or --grid")
    explicit = cfg.explicit
    # desk-scale profile unless the user configured the model or schedule explicitly
    model_keys = {"input_side", "p", "hv", "stage_channels", "stage_depths", "stage_heads", "final_pool"}
    base = cfg.model_config() if explicit & model_keys else desk_model_config()
    if not explicit & {"epochs", "warmup_epochs", "base_lr", "batch_size"}:
        cfg.values.update(epochs=30, warmup_epochs=3, base_lr=1e-3, batch_size=16)
    train_config = cfg.train_config()
    if cfg["manifest"]:
        records = _records(cfg)
    else:
        records = make_dataset(args.n, side=base.input_side, seed=args.data_seed)
    cells = []
    if args.variants:
        cells += variant_cells(base)
    if args.grid:
        cells += grid_cells(base)
    with _runtime(cfg):
        summary = run_cells(cells, records, cfg["k"] if "k" in explicit else min(cfg["k"], 3), train_config, cfg["out_dir"])
    for name, s in summary.items():
        if s["status"] == "skipped":
            print(f"{name:<12} skipped: {s['reason']}")
        else:
            print(f"{name:<12} AUC {s['auc']['mean']:.3f}±{s['auc']['std']:.3f}")


def cmd_delong(args) -> None:
    from .metrics import delong_test
    from .train import read_scores

    sa, sb, labels = _paired(read_scores(args.scores_a), read_scores(args.scores_b), args.scores_b)
    res = delong_test(sa, sb, labels)
    doc = {"scores_a": args.scores_a, "scores_b": args.scores_b, "n": len(labels),
           "auc_a": res.auc_a, "auc_b": res.auc_b, "z": res.z, "p_value": res.p_value}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    print(f"AUC A {res.auc_a:.4f}  AUC B {res.auc_b:.4f}  z {res.z:.4f}  p {res.p_value:.4g}")


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "ablate": cmd_ablate,
    "delong": cmd_delong,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except HoverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
