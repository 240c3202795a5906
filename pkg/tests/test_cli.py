import csv

import numpy as np
import pytest
import yaml

from sldd import artifact_io
from sldd.cli import main, parse_run_config, ConfigError
from sldd.patches import load_dataset

SMALL = {"model": {"input_shape": [1, 8, 8], "hidden": [32]}, "distill": {"steps": 6, "batch_size": 32}}


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    assert main(["synth", "patches", "--out", str(d), "--n-train", "300", "--n-test", "90", "--size", "8"]) == 0
    return d


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_distill_eval_report(bench, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.yaml", SMALL)
    out = tmp_path / "d"
    assert main(["distill", "--config", cfg, "--dataset", str(bench / "train"), "--out", str(out)]) == 0
    log = rows(out / "training_log.csv")
    assert [int(r["step"]) for r in log] == list(range(1, 7))
    assert yaml.safe_load((out / "effective_config.yaml").read_text())["distill"]["steps"] == 6
    art = artifact_io.load(out / "artifact.sldd")
    assert art.normalization is not None

    ev = tmp_path / "e"
    assert main(["eval", "--config", cfg, "--artifact", str(out / "artifact.sldd"), "--dataset", str(bench / "test"), "--accuracy-only", "--out", str(ev)]) == 0
    assert "accuracy=" in capsys.readouterr().out
    assert len(rows(ev / "predictions.csv")) == 90

    rep = tmp_path / "r"
    assert main(["report", "--artifact", str(out / "artifact.sldd"), "--log", str(out / "training_log.csv"), "--out", str(rep)]) == 0
    assert rows(rep / "size_report.csv")[0]["model"] == "mlp-32"
    assert (rep / "training_log.png").stat().st_size > 0


def test_zero_steps_gives_initialization(bench, tmp_path):
    cfg = write_config(tmp_path / "run.yaml", SMALL)
    assert main(["distill", "--config", cfg, "--dataset", str(bench / "train"), "--steps", "0", "--seed", "9", "--out", str(tmp_path)]) == 0
    art = artifact_io.load(tmp_path / "artifact.sldd")
    init = np.random.default_rng(np.random.SeedSequence(9).spawn(4)[0]).standard_normal((3, 1, 8, 8))
    np.testing.assert_array_equal(art.images, init)
    np.testing.assert_array_equal(art.labels, np.eye(3))
    assert art.inner_rate == 0.05


def test_rerun_is_bit_identical(bench, tmp_path):
    cfg = write_config(tmp_path / "run.yaml", SMALL)
    for name in ("a", "b"):
        assert main(["distill", "--config", cfg, "--dataset", str(bench / "train"), "--out", str(tmp_path / name)]) == 0
    for f in ("artifact.sldd", "training_log.csv", "effective_config.yaml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_invalid_key_is_a_config_error(bench, tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", {"distill": {"stepz": 3}})
    assert main(["distill", "--config", cfg, "--dataset", str(bench / "train"), "--out", str(tmp_path / "o")]) == 1
    assert "distill.stepz" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="lr"):
        parse_run_config({"distill": {"lr": "fast"}})


def test_usage_and_missing_inputs_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["distill", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert main(["eval", "--artifact", str(tmp_path / "none.sldd"), "--dataset", str(tmp_path)]) == 1


def test_numeric_failure_exits_two(bench, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.yaml", {**SMALL, "distill": {"steps": 3, "init_rate": 1e200, "batch_size": 32}})
    with np.errstate(all="ignore"):
        assert main(["distill", "--config", cfg, "--dataset", str(bench / "train"), "--out", str(tmp_path / "o")]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_output_root_from_environment(bench, tmp_path, monkeypatch):
    monkeypatch.setenv("SLDD_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = write_config(tmp_path / "run.yaml", {**SMALL, "distill": {"steps": 1, "batch_size": 32}})
    assert main(["distill", "--config", cfg, "--dataset", str(bench / "train")]) == 0
    assert (tmp_path / "root" / "distill" / "artifact.sldd").exists()


def test_slice_full_size_fixture(tmp_path):
    assert main(["synth", "scenes", "--out", str(tmp_path / "s"), "--n-images", "1", "--image-size", "2048"]) == 0
    args = ["slice", "--images", str(tmp_path / "s/images"), "--manifest", str(tmp_path / "s/manifest.csv"), "--unlabeled"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    index = rows(tmp_path / "a" / "index.csv")
    assert len(index) == 1225
    assert max(int(r["row"]) for r in index) == 34
    assert (tmp_path / "a/index.csv").read_bytes() == (tmp_path / "b/index.csv").read_bytes()


def test_slice_errors(tmp_path):
    main(["synth", "scenes", "--out", str(tmp_path / "s"), "--n-images", "2", "--image-size", "32"])
    (tmp_path / "empty.csv").write_text("image_id,label\n")
    base = ["slice", "--images", str(tmp_path / "s/images"), "--image-size", "32", "--patch-size", "8", "--stride", "4"]
    assert main(base + ["--masks", str(tmp_path / "s/masks"), "--manifest", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "o1")]) == 1
    assert not (tmp_path / "o1").exists()
    (tmp_path / "s/masks/img0001.pgm").unlink()
    assert main(base + ["--masks", str(tmp_path / "s/masks"), "--manifest", str(tmp_path / "s/manifest.csv"), "--out", str(tmp_path / "o2")]) == 1
    assert not (tmp_path / "o2").exists()


def test_scene_pipeline_with_voting_and_bn_ablation_flag(tmp_path):
    main(["synth", "scenes", "--out", str(tmp_path / "tr"), "--n-images", "4", "--image-size", "64"])
    main(["synth", "scenes", "--out", str(tmp_path / "te"), "--n-images", "4", "--image-size", "64", "--seed", "5"])
    cfg = write_config(tmp_path / "run.yaml", {
        "slice": {"image_size": 64, "patch_size": 16, "stride": 8},
        "model": {"kind": "convnet", "use_batchnorm": True},
        "distill": {"steps": 4, "batch_size": 32, "init_policy": "fixed"},
    })
    assert main(["slice", "--config", cfg, "--images", str(tmp_path / "tr/images"), "--masks", str(tmp_path / "tr/masks"),
                 "--manifest", str(tmp_path / "tr/manifest.csv"), "--out", str(tmp_path / "dtr")]) == 0
    assert main(["slice", "--config", cfg, "--images", str(tmp_path / "te/images"), "--manifest", str(tmp_path / "te/manifest.csv"),
                 "--unlabeled", "--out", str(tmp_path / "dte")]) == 0
    assert load_dataset(tmp_path / "dte").meta["image_labels"] == {"img0000": 0, "img0001": 1, "img0002": 0, "img0003": 1}
    assert main(["distill", "--config", cfg, "--dataset", str(tmp_path / "dtr"), "--out", str(tmp_path / "d")]) == 0
    for flag, out in (([], "e1"), (["--ignore-bn"], "e2")):
        assert main(["eval", "--config", cfg, "--artifact", str(tmp_path / "d/artifact.sldd"), "--dataset", str(tmp_path / "dte"),
                     "--delta-sweep", "--out", str(tmp_path / out)] + flag) == 0
        det = rows(tmp_path / out / "detection.csv")
        assert len(det) == 5 and det[-1]["image_id"] == "__aggregate__"
        assert len(rows(tmp_path / out / "delta_sweep.csv")) == 21


def test_baseline_command(bench, tmp_path):
    cfg = write_config(tmp_path / "run.yaml", {**SMALL, "train": {"epochs": 1, "min_steps": 5}})
    common = ["baseline", "--config", cfg, "--dataset", str(bench / "train"), "--test-dataset", str(bench / "test")]
    assert main(common + ["--sizes", "0", "--out", str(tmp_path / "x")]) == 1
    assert main(common + ["--sizes", "5000", "--out", str(tmp_path / "y")]) == 1
    assert main(common + ["--sizes", "1,100", "--distilled", "1", "--seeds", "0", "--out", str(tmp_path / "b")]) == 0
    out = rows(tmp_path / "b" / "baseline.csv")
    assert [r["method"] for r in out] == ["random-1-per-class", "random-100-per-class", "distilled-1"]
    assert [int(r["images_used"]) for r in out] == [3, 300, 1]


def test_sweep_single_cell_and_impossible_floor(bench, tmp_path):
    cfg = write_config(tmp_path / "run.yaml", {
        **SMALL,
        "sweep": {"models": [{"input_shape": [1, 8, 8], "hidden": [16]}], "sizes": [1], "floor": 1.01},
    })
    assert main(["sweep", "--config", cfg, "--dataset", str(bench / "train"), "--test-dataset", str(bench / "test"), "--out", str(tmp_path / "s")]) == 0
    assert len(rows(tmp_path / "s" / "sweep.csv")) == 1
    assert rows(tmp_path / "s" / "minimum_m.csv")[0]["minimum_M"] == "not reached"
    assert (tmp_path / "s" / "sweep.png").exists()
