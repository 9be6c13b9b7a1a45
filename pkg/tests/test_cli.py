import json
import os

import numpy as np
import pytest

from gmdg import cli
from gmdg.config import PHANTOM_TINY_LESION, PHANTOM_TINY_SPEC
from gmdg.data import read_volume, write_volume


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_unknown_subcommand_exits_1(capsys):
    assert run("bogus") == 1
    assert "usage" in capsys.readouterr().err
    assert run() == 1


def test_evaluate_identical_masks(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for d in ("p", "t"):
        os.makedirs(tmp_path / d)
    for i in range(3):
        lab = rng.integers(0, 4, (2, 12, 12))
        for d in ("p", "t"):
            write_volume(str(tmp_path / d / f"case{i}_label.nii.gz"), lab)
    out = tmp_path / "rep" / "report.json"
    assert run("evaluate", "--pred", tmp_path / "p", "--truth", tmp_path / "t", "--out", out,
               "--csv", tmp_path / "rep.csv") == 0
    report = json.loads(out.read_text())
    assert report["classes"] == [1, 2, 3]
    assert all(r["mean"] == 1.0 for r in report["rows"])
    assert all(v == 1.0 for row in report["per_case"] for v in row["dice"].values())
    assert "1.0000 ± 0.0000" in capsys.readouterr().out
    assert (tmp_path / "rep" / "run_manifest.json").exists()


def test_evaluate_missing_truth_exits_1(tmp_path):
    os.makedirs(tmp_path / "p")
    os.makedirs(tmp_path / "t")
    write_volume(str(tmp_path / "p" / "x_label.nii.gz"), np.zeros((1, 4, 4), int))
    assert run("evaluate", "--pred", tmp_path / "p", "--truth", tmp_path / "t") == 1


def test_invalid_config_exits_1(tmp_path):
    run("phantom", "--out", tmp_path / "ph", "--count", 2)
    assert run("train", "--data", tmp_path / "ph", "--out", tmp_path / "m.ckpt",
               "--modality", "A", "--set", "batch_size=-3") == 1
    bad = tmp_path / "spec.json"
    bad.write_text(json.dumps({"num_structures": 9}))
    assert run("phantom", "--spec", bad, "--out", tmp_path / "x") == 1


def test_runtime_failure_exits_2(tmp_path):
    (tmp_path / "m.ckpt").write_bytes(b"garbage")
    run("phantom", "--out", tmp_path / "ph", "--count", 2)
    assert run("adapt", "--model", tmp_path / "m.ckpt", "--data", tmp_path / "ph",
               "--out", tmp_path / "o", "--modality", "B") == 2


def test_pipeline_end_to_end(tmp_path):
    ph, pre = tmp_path / "ph", tmp_path / "pre"
    assert run("phantom", "--out", ph, "--count", 10) == 0
    assert json.loads((ph / "run_manifest.json").read_text())["seeds"] == list(range(10))
    assert run("preprocess", "--in", ph, "--out", pre) == 0
    meta = json.loads((pre / "gmr_meta.json").read_text())
    assert meta["bins"] == 256 and meta["padding"] == "edge"
    g, _ = read_volume(str(next(pre.glob("*_A.nii.gz"))))
    assert g.min() >= 0 and g.max() == 1.0

    ckpt = tmp_path / "models" / "m.ckpt"
    os.makedirs(ckpt.parent)
    assert run("train", "--data", pre, "--out", ckpt, "--modality", "A", "--profile", "tiny",
               "--iterations", 3, "--metrics", tmp_path / "metrics.jsonl",
               "--set", "batch_size=2") == 0
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == [0, 1, 2]
    manifest = json.loads((ckpt.parent / "run_manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["iterations"] == 3
    assert len(manifest["config_hash"]) == 64

    out = tmp_path / "pred"
    assert run("adapt", "--model", ckpt, "--data", pre, "--out", out, "--modality", "B",
               "--trace", tmp_path / "trace.jsonl", "--set", "n_iter=1") == 0
    preds = sorted(p.name for p in out.glob("*_label.nii.gz"))
    assert preds == ["phantom00009_label.nii.gz"]
    recs = [json.loads(line) for line in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert len(recs) == 1 and recs[0]["iteration"] == 1
    assert run("evaluate", "--pred", out, "--truth", ph) == 0


def test_adapt_rejects_raw_model_on_gradient_maps(tmp_path):
    ph, pre = tmp_path / "ph", tmp_path / "pre"
    run("phantom", "--out", ph, "--count", 2)
    run("preprocess", "--in", ph, "--out", pre)
    assert run("train", "--data", ph, "--out", tmp_path / "raw.ckpt", "--modality", "A",
               "--representation", "raw", "--profile", "tiny", "--iterations", 1) == 0
    assert run("adapt", "--model", tmp_path / "raw.ckpt", "--data", pre, "--out", tmp_path / "o",
               "--modality", "B") == 1


def test_ablate_matches_individual_commands(tmp_path):
    n_train, n_test, iters = 6, 3, 20
    out = tmp_path / "abl"
    assert run("ablate", "--profile", "phantom-tiny", "--out", out,
               "--set", "seeds=[0]", "--set", f"train.iterations={iters}",
               "--set", f"dataset.phantom.n_train={n_train}",
               "--set", f"dataset.phantom.n_test={n_test}") == 0
    report = json.loads((out / "report.json").read_text())
    assert report["arms"] == ["SrcOnly(raw)", "SrcOnly(GMR)", "raw+PITTA", "GMR+PITTA"]
    table = (out / "table.md").read_text()
    assert table.count("\n") == 2 + 4
    assert (out / "report.csv").exists() and (out / "run_manifest.json").exists()

    test_spec = tmp_path / "test_spec.json"
    test_spec.write_text(json.dumps({**PHANTOM_TINY_SPEC, "lesion": PHANTOM_TINY_LESION}))
    assert run("phantom", "--out", tmp_path / "tr", "--count", n_train) == 0
    assert run("phantom", "--spec", test_spec, "--out", tmp_path / "te", "--count", n_test,
               "--start-seed", 1000) == 0
    common = ["--set", "split=all"]
    for rep in ("raw", "gmr"):
        assert run("train", "--data", tmp_path / "tr", "--out", tmp_path / f"{rep}.ckpt",
                   "--modality", "A", "--representation", rep, "--profile", "tiny",
                   "--iterations", iters, "--seed", 0, "--metrics", tmp_path / "m.jsonl",
                   "--set", "learning_rate=0.001", "--set", "batch_size=12", *common) == 0
    arms = {"SrcOnly(raw)": ("raw", True), "SrcOnly(GMR)": ("gmr", True),
            "raw+PITTA": ("raw", False), "GMR+PITTA": ("gmr", False)}
    for arm, (rep, source_only) in arms.items():
        pred = tmp_path / f"pred_{rep}_{source_only}"
        flags = ["--source-only"] if source_only else []
        assert run("adapt", "--model", tmp_path / f"{rep}.ckpt", "--data", tmp_path / "te",
                   "--out", pred, "--modality", "B", "--set", "alpha=0.9",
                   "--set", "lv_classes=[1]", *common, *flags) == 0
        assert run("evaluate", "--pred", pred, "--truth", tmp_path / "te", "--arm", arm,
                   "--classes", 1, 2, 3, "--out", pred / "report.json") == 0
        mine = json.loads((pred / "report.json").read_text())["per_case"]
        theirs = [r for r in report["per_case"] if r["arm"] == arm]
        assert [r["dice"] for r in mine] == [r["dice"] for r in theirs], arm
