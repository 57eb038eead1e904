import csv
import hashlib
import json
import subprocess
import sys

import pytest

from hovertrans.ablation import GRID_HV, GRID_P, desk_model_config, grid_cells
from hovertrans.cli import main
from hovertrans.train import ScoreRow, write_scores

TINY = """\
input_side = 32
p = 1
hv = 1
stage_channels = 2, 4, 8, 16
stage_depths = 1, 1, 1, 1
stage_heads = 1, 2, 2, 4
final_pool = false
epochs = 2
warmup_epochs = 1
batch_size = 8
base_lr = 1e-3
k = 2
"""


def _tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(root), "--n", "12", "--side", "32", "--seed", "3"]) == 0
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    return root, cfg


def _base(dataset):
    root, cfg = dataset
    return ["--config", str(cfg), "--manifest", str(root / "manifest.csv"), "--image-root", str(root / "images")]


def test_split_twice_identical(dataset, tmp_path):
    for name in ("a.csv", "b.csv"):
        assert main(["split", *_base(dataset), "--k", "5", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 12 and {int(r["fold"]) for r in rows} == set(range(5))


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root, _ = dataset
    before = _tree_digest(root)
    outs = []
    for name in ("run1", "run2"):
        out = tmp_path_factory.mktemp(name)
        assert main(["train", *_base(dataset), "--out-dir", str(out)]) == 0
        outs.append(out)
    assert _tree_digest(root) == before, "train mutated its inputs"
    return outs


def test_train_outputs(trained):
    out = trained[0]
    for name in ("fold0.ckpt", "fold1.ckpt", "fold0.log.jsonl", "scores.csv", "report.json", "run.cfg"):
        assert (out / name).is_file()
    rows = list(csv.DictReader(open(out / "scores.csv")))
    assert len(rows) == 12
    report = json.loads((out / "report.json").read_text())
    assert len(report["folds"]) == 2


def test_train_rerun_byte_identical(trained):
    a, b = trained
    for name in ("fold0.ckpt", "fold1.ckpt", "scores.csv", "report.json", "fold0.log.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_eval_and_delong(trained, dataset, tmp_path, capsys):
    scores = trained[0] / "scores.csv"
    root, _ = dataset
    out = tmp_path / "report.json"
    code = main(["eval", "--scores", str(scores), "--compare", str(trained[1] / "scores.csv"),
                 "--manifest", str(root / "manifest.csv"), "--birads-subgroups", "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert set(doc["subgroups"]) <= {"2-3", "4-5"} and doc["subgroups"]
    (name, d), = doc["delong"].items()
    assert d["p_value"] == 1.0
    assert "mean±std" in capsys.readouterr().out
    assert main(["delong", str(scores), str(scores), "--out", str(tmp_path / "d.json")]) == 0
    assert json.loads((tmp_path / "d.json").read_text())["p_value"] == 1.0


def test_eval_perfect_scores(tmp_path):
    rows = [ScoreRow(f"i{i}.png", i % 2, float(i % 3 == 0), int(i % 3 == 0)) for i in range(12)]
    write_scores(tmp_path / "s.csv", rows)
    assert main(["eval", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path / "r.json")]) == 0
    agg = json.loads((tmp_path / "r.json").read_text())["aggregate"]
    assert all(v["mean"] == 1.0 for v in agg.values())


def test_heatmap(trained, dataset, tmp_path):
    root, _ = dataset
    args = ["heatmap", *_base(dataset), "--checkpoint", str(trained[0] / "fold0.ckpt"),
            "--out-dir", str(tmp_path / "h"), "--id", "synth_00000.png", "--id", "synth_00001.png"]
    assert main(args) == 0
    pngs = sorted((tmp_path / "h").glob("*.png"))
    assert [p.name for p in pngs] == ["synth_00000_heatmap.png", "synth_00001_heatmap.png"]
    meta = json.loads(pngs[0].with_suffix(".json").read_text())
    assert meta["checkpoint_id"].startswith("fold0.ckpt:") and meta["method"] == "activation"
    args[args.index(str(tmp_path / "h"))] = str(tmp_path / "h2")
    assert main(args) == 0
    assert pngs[0].read_bytes() == (tmp_path / "h2" / pngs[0].name).read_bytes()


def test_prepare(dataset, tmp_path):
    root, _ = dataset
    assert main(["prepare", *_base(dataset), "--out-dir", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "manifest.csv").is_file()
    assert len(list((tmp_path / "p" / "images").glob("*.png"))) == 12
    log = list(csv.DictReader(open(tmp_path / "p" / "prepare_log.csv")))
    assert len(log) == 12


def _legal(side, p, hv, channels, heads):
    """Independent legality rule for the desk grid."""
    sides = [side // 4 // 2**s for s in range(4)]
    if any(s % p or s % hv for s in sides):
        return False
    if hv % p and p % hv:
        return False
    return all((p * p * c) % h == 0 for c, h in zip(channels, heads))


def test_grid_enumeration_matches_independent_rule():
    base = desk_model_config()
    cells = grid_cells(base)
    assert len(cells) == 9
    for cell, (p, hv) in zip(cells, [(p, hv) for p in GRID_P for hv in GRID_HV]):
        assert cell.name == f"p{p}_hv{hv}"
        legal = _legal(base.input_side, p, hv, base.stage_channels, base.stage_heads)
        assert (cell.config is not None) == legal
        if not legal:
            assert cell.skipped


def test_ablate_grid(tmp_path, capsys):
    out = tmp_path / "abl"
    code = main(["ablate", "--grid", "--out-dir", str(out), "--n", "12",
                 "--set", "epochs=1", "--set", "warmup_epochs=0", "--set", "k=2"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary) == 9
    skipped = {k for k, v in summary.items() if v["status"] == "skipped"}
    assert skipped == {"p8_hv1", "p8_hv2", "p8_hv4"}
    for name, v in summary.items():
        if v["status"] == "ok":
            assert (out / name / "report.json").is_file()
        else:
            assert "p=8" in v["reason"]
    printed = capsys.readouterr().out
    assert printed.count("skipped") == 3


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--set", "nonsense=1", "--out-dir", str(tmp_path)]) == 1
    assert "nonsense" in capsys.readouterr().err
    assert main(["eval", "--scores", str(tmp_path / "missing.csv")]) == 1
    assert "missing.csv" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    assert main(["heatmap", "--checkpoint", str(bad), "--out-dir", str(tmp_path), "--manifest", "m", "--image-root", "r"]) == 1


def test_runtime_failure_exit_2(dataset, tmp_path):
    # a learning rate this large drives the loss to NaN: a runtime failure, not a validation one
    code = main(["train", *_base(dataset), "--out-dir", str(tmp_path), "--set", "base_lr=1e30", "--set", "epochs=3"])
    assert code == 2


def test_help_lists_schema():
    res = subprocess.run([sys.executable, "-m", "hovertrans.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for word in ("prepare", "split", "train", "eval", "heatmap", "ablate", "delong", "weight_decay", "p_hflip"):
        assert word in res.stdout


def test_ablate_variants(tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", "--variants", "--out-dir", str(out), "--n", "12",
                 "--set", "epochs=1", "--set", "warmup_epochs=0", "--set", "k=2"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert sorted(summary) == ["full", "model_p", "model_p_h", "model_p_v"]
    assert all(v["status"] == "ok" and v["config"]["variant"] == k for k, v in summary.items())


def test_ablate_needs_a_sweep(tmp_path):
    assert main(["ablate", "--out-dir", str(tmp_path)]) == 1
