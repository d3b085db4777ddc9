import json
from pathlib import Path

import numpy as np
import pytest

from habmap.archive import PatchArchive
from habmap.cli import CONFIG_ENV, build_parser, main, resolve_config
from habmap.pipeline import (
    MODEL_GRID,
    RF_BASELINE,
    ModelAttributes,
    RunConfig,
    UsageError,
    Workspace,
    parse_config_text,
    resolve_attributes,
    stage_seed,
)

TINY = [
    "epochs=2", "pretrain_epochs=1", "n_trees=4", "k_folds=2", "stage_widths=4",
    "tta_rounds=2", "iic_clusters=3", "batch_size=32", "patch_size=7", "crop_max=7",
]


def sets(*extra):
    return sum((["--set", s] for s in TINY + list(extra)), [])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    rc = main([
        "synth", "--out", str(out), "--height", "160", "--width", "160", "--channels", "5",
        "--pretrain-rows", "96", "--pretrain-points", "60", "--pretrain-min-dist", "60",
        "--largest-class", "40", "--imbalance", "20", "--seed", "3",
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def work(synth_dir, tmp_path_factory):
    """A workspace with every stage run once."""
    w = tmp_path_factory.mktemp("work")
    cfg = str(synth_dir / "habmap.cfg")
    steps = [
        ["ingest"], ["split"], ["train-rf"], ["pretrain", "--mode", "coarse"],
        ["pretrain", "--mode", "iic"], ["train-cnn"], ["train-cnn", "--pretrained", "coarse", "--freeze-conv"],
        ["distill", "--pretrained", "coarse", "--freeze-conv"], ["evaluate"],
    ]
    for s in steps:
        assert main([s[0], "--work", str(w), "--config", cfg] + sets() + s[1:]) == 0, s
    return w, cfg


def run(work, *args, extra=()):
    w, cfg = work
    return main([args[0], "--work", str(w), "--config", cfg] + sets(*extra) + list(args[1:]))


class TestConfig:
    def test_defaults(self):
        c = RunConfig()
        assert (c.epochs, c.pretrain_epochs, c.batch_size, c.lr) == (500, 50, 128, 1e-4)
        assert (c.patch_size, c.crop_max, c.tta_rounds, c.ensemble_alpha) == (49, 19, 5, 0.5)
        assert (c.n_trees, c.k_folds, c.test_fraction) == (100, 5, 0.2)
        assert c.input_size == 19

    def test_parse(self):
        vals = parse_config_text("# c\nepochs = 3  # trailing\nfreeze-conv = yes\nstage_widths = 4, 8\n\n")
        assert vals == {"epochs": 3, "freeze_conv": True, "stage_widths": (4, 8)}
        for bad in ("nonsense = 1", "epochs 3", "epochs = x", "freeze_conv = maybe"):
            with pytest.raises(UsageError):
                parse_config_text(bad)

    def test_validation(self):
        with pytest.raises(UsageError):
            RunConfig(freeze_conv=True)
        with pytest.raises(UsageError):
            RunConfig(patch_size=48)
        with pytest.raises(UsageError):
            RunConfig(ensemble_alpha=2)

    def test_precedence(self, tmp_path):
        f = tmp_path / "a.cfg"
        f.write_text("epochs = 7\nlr = 0.5\nannotations = pts.csv\n")
        p = build_parser()
        args = p.parse_args(["train-cnn", "--work", "w", "--set", "lr=0.25", "--epochs", "9"])
        cfg = resolve_config(args, {CONFIG_ENV: str(f)})
        assert cfg.epochs == 9 and cfg.lr == 0.25
        assert cfg.annotations == str(tmp_path / "pts.csv")
        args = p.parse_args(["train-cnn", "--work", "w"])
        assert resolve_config(args, {}).epochs == 500
        with pytest.raises(UsageError):
            resolve_config(args, {CONFIG_ENV: str(tmp_path / "missing.cfg")})


class TestGrid:
    def test_eleven_rows_plus_rf(self):
        assert len(MODEL_GRID) == 11
        slugs = {a.slug for a in MODEL_GRID.values()}
        assert len(slugs) == 11 and RF_BASELINE not in slugs
        assert len(set(MODEL_GRID.values())) == 11

    def test_rows(self):
        assert resolve_attributes("PT") == ModelAttributes("coarse", True, False, False)
        assert resolve_attributes("NS") == ModelAttributes("coarse", True, False, True)
        assert resolve_attributes("upt") == ModelAttributes("unsupervised", True, False, False)
        assert resolve_attributes("ns-crop-no-freeze").crop_augment
        assert resolve_attributes("NS crop").teacher.slug == "pt-crop"
        with pytest.raises(UsageError):
            resolve_attributes("XL")

    def test_stage_seed(self):
        assert stage_seed(0, "cnn", 1) == stage_seed(0, "cnn", 1)
        assert stage_seed(0, "cnn", 1) != stage_seed(1, "cnn", 1)


class TestExitCodes:
    def test_usage(self, capsys):
        assert main([]) == 1
        assert main(["train-cnn"]) == 1
        assert main(["pretrain", "--work", "w", "--mode", "bogus"]) == 1
        assert main(["--version"]) == 0
        assert "habmap" in capsys.readouterr().out

    def test_freeze_without_pretraining(self, tmp_path, capsys):
        assert main(["train-cnn", "--work", str(tmp_path), "--freeze-conv"]) == 1
        assert "pretrain" in capsys.readouterr().err

    def test_missing_stage_names_prerequisite(self, tmp_path, capsys):
        assert main(["split", "--work", str(tmp_path)]) == 1
        assert "run `ingest` first" in capsys.readouterr().err

    def test_data_error(self, tmp_path, capsys):
        (tmp_path / "a.csv").write_text("id,x,y,class_code\n1,0,0,ZZZ\n")
        rc = main(["ingest", "--work", str(tmp_path / "w"), "--raster", str(tmp_path / "none.msrs"),
                   "--annotations", str(tmp_path / "a.csv")])
        assert rc == 2
        assert "not found" in capsys.readouterr().err

    def test_numerical_failure(self, work, tmp_path):
        w, cfg = work
        fresh = tmp_path / "w"
        for s in ("ingest", "split"):
            assert main([s, "--work", str(fresh), "--config", cfg] + sets()) == 0
        assert main(["train-cnn", "--work", str(fresh), "--config", cfg, "--fold", "0"] + sets("lr=1e30")) == 3


class TestStages:
    def test_ingest_outputs(self, work, synth_dir):
        w, _ = work
        a = PatchArchive.load(w / "data" / "patches.ptch")
        stats = json.loads((w / "data" / "stats.json").read_text())
        assert a.patches.shape[1:] == (5, 7, 7)
        assert stats["shape"][0] == 5
        n_points = len((synth_dir / "annotations.csv").read_text().splitlines()) - 1
        skipped = len((w / "data" / "patches_skipped.csv").read_text().splitlines()) - 1
        assert len(a) + skipped == n_points

    def test_refuses_overwrite(self, work, capsys):
        assert run(work, "split") == 1
        assert "--force" in capsys.readouterr().err

    def test_force_overwrite_same_bytes(self, work):
        w, _ = work
        before = (w / "splits" / "fold0.json").read_bytes()
        assert run(work, "split", "--force") == 0
        assert (w / "splits" / "fold0.json").read_bytes() == before

    def test_distill_needs_teacher(self, work, capsys):
        assert run(work, "distill", "--fold", "0", "--crop-augment") == 1
        assert "train-cnn (base-crop)" in capsys.readouterr().err

    def test_manifest(self, work):
        w, _ = work
        m = json.loads((w / "manifest.json").read_text())
        stages = [e["stage"] for e in m["stages"]]
        assert stages[:3] == ["ingest", "split", "train-rf"]
        for e in m["stages"]:
            assert e["tool"] == "habmap" and "seconds" in e and e["config"]["k_folds"] == 2
            for rel in e["outputs"]:
                assert (w / rel).exists()

    def test_evaluate_outputs(self, work):
        w, _ = work
        ev = w / "eval"
        for key in ("rf", "base/cnn", "base/ensemble", "pt/cnn", "ns/ensemble"):
            for f in (0, 1):
                rep = json.loads((ev / key / f"fold{f}" / "report.json").read_text())
                assert rep["n_classes"] == 8
            assert json.loads((ev / key / "aggregate.json").read_text())["n_folds"] == 2
        rows = (ev / "comparison.csv").read_text().splitlines()
        assert rows[0].startswith("model,predictor,precision_weighted_mean")
        assert len(rows) == 1 + 1 + 2 * 3
        assert (ev / "figures" / "fold_f1_weighted.svg").exists()
        assert (ev / "figures" / "pt_ensemble_confusion.svg").exists()

    def test_predict_map(self, work):
        w, _ = work
        assert run(work, "predict-map", "--model", "pt", "--window", "10", "20", "6", "5",
                   "--tile-rows", "2", "--workers", "2") == 0
        out = w / "maps" / "pt-ensemble"
        assert {p.name for p in out.iterdir()} >= {"class_map.msrs", "probabilities.msrs", "classes.txt",
                                                   "class_map.png", "max_confidence.png"}
        assert run(work, "predict-map", "--model", "pt", "--window", "90", "90", "50", "5") == 1
        assert run(work, "predict-map", "--model", "rf", "--stride", "8") == 0

    def test_pipeline_reuses_stages(self, work, tmp_path):
        w, cfg = work
        assert main(["pipeline", "--work", str(w), "--config", cfg, "--attributes", "PT crop"] + sets()) == 0
        m = json.loads((w / "manifest.json").read_text())["stages"]
        tail = [e["stage"] for e in m[-3:]]
        assert tail == ["train-cnn", "train-cnn", "evaluate"]
        assert (w / "eval-pt-crop" / "pt-crop" / "cnn" / "fold1" / "report.json").exists()


def test_rerun_is_byte_identical(synth_dir, tmp_path):
    cfg = str(synth_dir / "habmap.cfg")
    hashes = []
    for name in ("a", "b"):
        w = tmp_path / name
        for s in (["ingest"], ["split"], ["train-rf"], ["train-cnn", "--crop-augment"], ["evaluate"]):
            assert main([s[0], "--work", str(w), "--config", cfg] + sets() + s[1:]) == 0
        hashes.append(Workspace(w).output_hashes())
    assert hashes[0] == hashes[1]
    assert len(hashes[0]) > 20
