import json

import numpy as np
import pytest

from fsra.cli import main
from fsra.head import region_sizes


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata") / "data"
    rc = main(["synth-data", "--classes", "4", "--drone-per-class", "3",
               "--size", "16", "--seed", "5", "--distractors", "2",
               "--test-drone-per-class", "2", "--out", str(root)])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def cli_config(cli_dataset, tmp_path_factory):
    cfg_dir = tmp_path_factory.mktemp("clicfg")
    tree = {
        "backbone": {"image_size": 16, "patch_size": 8, "embed_dim": 8, "depth": 1,
                     "heads": 2, "mlp_ratio": 2.0, "dropout": 0.1},
        "train": {"epochs": 2, "batch_size": 4, "seed": 0},
        "loss": {"use_triplet": True, "margin": 0.3},
        "sampler": {"k": 2},
        "regions": 1,
        "head_hidden": 16,
        "data_root": str(cli_dataset / "train"),
        "eval_root": str(cli_dataset / "test"),
        "out_dir": str(cfg_dir / "run"),
    }
    path = cfg_dir / "toy.json"
    path.write_text(json.dumps(tree, indent=1))
    return path, cfg_dir


@pytest.fixture(scope="module")
def trained_run(cli_config):
    cfg_path, cfg_dir = cli_config
    rc = main(["train", "--config", str(cfg_path)])
    assert rc == 0
    run_dir = cfg_dir / "run"
    ckpt = run_dir / "ckpt_epoch_1.bin"
    assert ckpt.exists()
    return ckpt


class TestSynthData:
    def test_counts(self, cli_dataset):
        train_drone = list((cli_dataset / "train" / "drone").rglob("*.png"))
        train_sat = list((cli_dataset / "train" / "satellite").rglob("*.png"))
        test_sat_classes = list((cli_dataset / "test" / "satellite").iterdir())
        assert len(train_drone) == 12 and len(train_sat) == 4
        assert len(test_sat_classes) == 6  # 4 true + 2 distractors

    def test_seed_repeat_identical_manifest(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth-data", "--classes", "2", "--drone-per-class", "2",
                         "--size", "16", "--seed", "9", "--distractors", "0",
                         "--test-drone-per-class", "0", "--out", str(tmp_path / sub)]) == 0
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b

    def test_invalid_out_dir_nonzero_exit(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        rc = main(["synth-data", "--classes", "1", "--drone-per-class", "1",
                   "--size", "16", "--out", str(blocker)])
        assert rc != 0
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_writes_artifacts(self, trained_run):
        run_dir = trained_run.parent
        assert (run_dir / "train_log.csv").exists()
        assert (run_dir / "run_config.json").exists()

    def test_override_regions_zero_baseline(self, cli_config, tmp_path):
        cfg_path, _ = cli_config
        out = tmp_path / "baseline"
        rc = main(["train", "--config", str(cfg_path),
                   "--override", "regions=0",
                   "--override", f"out_dir={json.dumps(str(out))}",
                   "--override", "train.epochs=1"])
        assert rc == 0
        echoed = json.loads((out / "run_config.json").read_text())
        assert echoed["regions"] == 0

    def test_override_sampler_k(self, cli_config, tmp_path):
        cfg_path, _ = cli_config
        out = tmp_path / "k3"
        rc = main(["train", "--config", str(cfg_path),
                   "--override", "sampler.k=3",
                   "--override", f"out_dir={json.dumps(str(out))}",
                   "--override", "train.epochs=1"])
        assert rc == 0
        echoed = json.loads((out / "run_config.json").read_text())
        assert echoed["sampler"]["k"] == 3
        # 4 classes * k=3 pairs per epoch
        log = (out / "train_log.csv").read_text().splitlines()[1:]
        assert len(log) == 3  # 12 pairs / batch 4

    def test_bad_config_nonzero_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"nonsense": 1}))
        assert main(["train", "--config", str(bad)]) != 0
        assert "error" in capsys.readouterr().err


class TestEval:
    def test_d2s_report(self, trained_run, cli_dataset, tmp_path):
        out = tmp_path / "eval"
        rc = main(["eval", "--ckpt", str(trained_run),
                   "--dataset", str(cli_dataset / "test"),
                   "--direction", "d2s", "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "eval_report.json").read_text())
        for key in ("recall_at", "ap", "recall_top1pct", "config_hash",
                    "dataset_manifest_sha256"):
            assert key in report
        assert report["direction"] == "d2s"
        assert report["dataset_manifest_sha256"] is not None

    def test_s2d_swaps_roles(self, trained_run, cli_dataset, tmp_path):
        out = tmp_path / "eval_s2d"
        rc = main(["eval", "--ckpt", str(trained_run),
                   "--dataset", str(cli_dataset / "test"),
                   "--direction", "s2d", "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "eval_report.json").read_text())
        # 6 satellite classes query over the drone gallery of 4 classes
        assert report["queries"] == 6
        assert report["gallery"] == 8
        assert report["excluded_queries"] == 2  # distractors have no drone match

    def test_pad_sweep_rows(self, trained_run, cli_dataset, tmp_path):
        out = tmp_path / "eval_pad"
        rc = main(["eval", "--ckpt", str(trained_run),
                   "--dataset", str(cli_dataset / "test"),
                   "--pad-mode", "BP", "--pad-widths", "0,4,8", "--out", str(out)])
        assert rc == 0
        lines = (out / "robustness_BP.csv").read_text().splitlines()
        assert lines[0] == "width,R@1,AP,delta_AP"
        assert len(lines) == 4
        first = lines[1].split(",")
        assert first[0] == "0" and float(first[3]) == 0.0

    def test_missing_checkpoint_nonzero_exit(self, cli_dataset, tmp_path, capsys):
        rc = main(["eval", "--ckpt", str(tmp_path / "nope.bin"),
                   "--dataset", str(cli_dataset / "test")])
        assert rc != 0
        capsys.readouterr()


class TestHeatDump:
    def test_grids_written_and_histogram_matches(self, trained_run, cli_dataset, tmp_path):
        image = next((cli_dataset / "test" / "drone").rglob("*.png"))
        out = tmp_path / "heat"
        rc = main(["heat-dump", "--ckpt", str(trained_run), "--image", str(image),
                   "--regions", "2", "--out", str(out), "--pgm"])
        assert rc == 0
        region_grid = np.loadtxt(out / f"{image.stem}.region.csv", delimiter=",",
                                 dtype=np.int64)
        counts = np.bincount(region_grid.reshape(-1))[1:]
        np.testing.assert_array_equal(counts, region_sizes(region_grid.size, 2))
        assert (out / f"{image.stem}.heat.csv").exists()
        assert (out / f"{image.stem}.heat.pgm").exists()

    def test_single_region(self, trained_run, cli_dataset, tmp_path):
        image = next((cli_dataset / "test" / "drone").rglob("*.png"))
        out = tmp_path / "heat1"
        rc = main(["heat-dump", "--ckpt", str(trained_run), "--image", str(image),
                   "--regions", "1", "--out", str(out)])
        assert rc == 0
        region_grid = np.loadtxt(out / f"{image.stem}.region.csv", delimiter=",",
                                 dtype=np.int64)
        assert set(region_grid.reshape(-1)) == {1}

    def test_rerun_identical(self, trained_run, cli_dataset, tmp_path):
        image = next((cli_dataset / "test" / "drone").rglob("*.png"))
        outs = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            assert main(["heat-dump", "--ckpt", str(trained_run), "--image", str(image),
                         "--regions", "2", "--out", str(out)]) == 0
            outs.append((out / f"{image.stem}.heat.csv").read_bytes())
        assert outs[0] == outs[1]


class TestSweep:
    def test_regions_sweep_rows_and_columns(self, cli_config, tmp_path):
        cfg_path, _ = cli_config
        out = tmp_path / "sweep"
        rc = main(["sweep", "--param", "regions", "--values", "0,1,2",
                   "--config", str(cfg_path), "--override", "train.epochs=1",
                   "--out", str(out)])
        assert rc == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "param,value,R@1_d2s,AP_d2s,R@1_s2d,AP_s2d"
        assert len(lines) == 4
        for line in lines[1:]:
            cells = line.split(",")
            assert cells[0] == "regions"
            assert all(c != "nan" for c in cells[2:])

    def test_k_sweep_with_batch_override(self, cli_config, tmp_path):
        cfg_path, _ = cli_config
        out = tmp_path / "ksweep"
        rc = main(["sweep", "--param", "k", "--values", "1,2",
                   "--config", str(cfg_path), "--override", "train.epochs=1",
                   "--override", "train.batch_size=8", "--out", str(out)])
        assert rc == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_failed_point_marked_and_sweep_continues(self, cli_config, tmp_path, capsys):
        cfg_path, _ = cli_config
        out = tmp_path / "failsweep"
        # image-size 12 is not divisible by patch 8: that point must fail
        rc = main(["sweep", "--param", "image-size", "--values", "12,16",
                   "--config", str(cfg_path), "--override", "train.epochs=1",
                   "--out", str(out)])
        assert rc == 0
        capsys.readouterr()
        lines = (out / "sweep.csv").read_text().splitlines()
        assert len(lines) == 3
        failed = lines[1].split(",")
        good = lines[2].split(",")
        assert failed[2] == "nan" and good[2] != "nan"
