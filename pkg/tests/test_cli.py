import json
from pathlib import Path

import numpy as np
import pytest

from anymotion.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main([
        "gen-data", "--out", str(out), "--n-samples", "14", "--frames", "16",
        "--eval3", "2", "--eval4", "2", "--seed", "1",
    ])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    """Tiny stage-1 + stage-2 + spatial chain shared by the command tests."""
    out = tmp_path_factory.mktemp("runs")
    common = ["--hidden", "16", "--heads", "2", "--blocks", "2",
              "--max-frames", "16", "--diffusion-steps", "100",
              "--epochs", "1", "--batch-size", "8"]
    rc = main(["train", "--stage", "1", "--data", str(data_dir / "train.jsonl"),
               "--out", str(out / "s1")] + common)
    assert rc == 0
    rc = main(["train", "--stage", "2", "--data", str(data_dir / "train.jsonl"),
               "--out", str(out / "s2"),
               "--init-from", str(out / "s1" / "checkpoints" / "stage1")] + common)
    assert rc == 0
    rc = main(["train", "--stage", "spatial", "--data", str(data_dir / "train.jsonl"),
               "--out", str(out / "sp"),
               "--init-from", str(out / "s2" / "checkpoints" / "stage2")] + common)
    assert rc == 0
    return out


class TestGenData:
    def test_files_and_counts(self, data_dir):
        for name in ("train.jsonl", "test.jsonl", "eval_n3.jsonl", "eval_n4.jsonl"):
            assert (data_dir / name).exists()
        train = (data_dir / "train.jsonl").read_text().splitlines()
        test = (data_dir / "test.jsonl").read_text().splitlines()
        assert len(train) + len(test) == 14
        n3 = (data_dir / "eval_n3.jsonl").read_text().splitlines()
        assert len(n3) == 2
        assert json.loads(n3[0])["n_persons"] == 3
        assert (data_dir / "config.resolved.json").exists()

    def test_rerun_same_seed_identical(self, data_dir, tmp_path):
        rc = main([
            "gen-data", "--out", str(tmp_path), "--n-samples", "14", "--frames",
            "16", "--eval3", "2", "--eval4", "2", "--seed", "1",
        ])
        assert rc == 0
        assert (tmp_path / "train.jsonl").read_bytes() == (
            data_dir / "train.jsonl"
        ).read_bytes()

    def test_refuses_overwrite(self, data_dir):
        rc = main(["gen-data", "--out", str(data_dir), "--n-samples", "2"])
        assert rc == 2

    def test_invalid_fraction_exit_2(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "x"),
                   "--train-fraction", "1.5", "--n-samples", "4"])
        assert rc == 2
        assert "train_fraction" in capsys.readouterr().err


class TestTrain:
    def test_checkpoints_written(self, run_dir):
        for stage, sub in (("1", "s1"), ("2", "s2"), ("spatial", "sp")):
            ckpt = run_dir / sub / "checkpoints" / f"stage{stage}"
            assert (ckpt / "manifest.json").exists()
            assert (ckpt / "weights.bin").exists()
            assert (run_dir / sub / "log.csv").exists()
            assert (run_dir / sub / "config.resolved.json").exists()

    def test_stage2_requires_init(self, data_dir, tmp_path):
        rc = main(["train", "--stage", "2", "--data", str(data_dir / "train.jsonl"),
                   "--out", str(tmp_path / "x"), "--epochs", "1"])
        assert rc == 2

    def test_missing_prerequisite_named(self, data_dir, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        rc = main(["train", "--stage", "2", "--data", str(data_dir / "train.jsonl"),
                   "--out", str(tmp_path / "x"), "--init-from", str(missing),
                   "--epochs", "1"])
        assert rc == 2
        assert str(missing) in capsys.readouterr().err

    def test_missing_data_exit_2(self, tmp_path):
        rc = main(["train", "--stage", "1", "--data", str(tmp_path / "no.jsonl"),
                   "--out", str(tmp_path / "x"), "--epochs", "1"])
        assert rc == 2


class TestSample:
    def test_single_person(self, run_dir, tmp_path):
        out = tmp_path / "one"
        rc = main(["sample", "--ckpt", str(run_dir / "s2" / "checkpoints" / "stage2"),
                   "--out", str(out), "--num-persons", "1",
                   "--text", "a person waves", "--frames", "16", "--steps", "5",
                   "--seed", "3"])
        assert rc == 0
        assert (out / "outputs" / "person_1.jsonl").exists()
        assert (out / "outputs" / "trajectory.csv").exists()
        rec = json.loads((out / "outputs" / "person_1.jsonl").read_text())
        assert rec["n_persons"] == 1 and rec["F"] == 16

    def test_four_person_files(self, run_dir, tmp_path):
        out = tmp_path / "four"
        args = ["sample", "--ckpt", str(run_dir / "s2" / "checkpoints" / "stage2"),
                "--out", str(out), "--num-persons", "4", "--frames", "16",
                "--steps", "4", "--seed", "5"]
        for i in range(4):
            args += ["--text", f"person {i} walks"]
        rc = main(args)
        assert rc == 0
        files = [out / "outputs" / f"person_{i + 1}.jsonl" for i in range(4)]
        assert all(f.exists() for f in files)

    def test_text_count_mismatch(self, run_dir, tmp_path):
        rc = main(["sample", "--ckpt", str(run_dir / "s2" / "checkpoints" / "stage2"),
                   "--out", str(tmp_path / "x"), "--num-persons", "2",
                   "--text", "only one"])
        assert rc == 2

    def test_missing_checkpoint(self, tmp_path, capsys):
        rc = main(["sample", "--ckpt", str(tmp_path / "none"), "--out",
                   str(tmp_path / "y"), "--text", "hi"])
        assert rc == 2
        assert "none" in capsys.readouterr().err

    def test_spatial_file(self, run_dir, tmp_path):
        spatial = {
            "frames": 16, "joints": 7,
            "targets": np.zeros((16, 7, 3)).tolist(),
            "observed": np.ones((16, 7)).tolist(),
        }
        spath = tmp_path / "spatial.json"
        spath.write_text(json.dumps(spatial))
        out = tmp_path / "guided"
        rc = main(["sample", "--ckpt", str(run_dir / "sp" / "checkpoints" / "stagespatial"),
                   "--out", str(out), "--num-persons", "1", "--text", "a person",
                   "--frames", "16", "--steps", "5", "--spatial", str(spath)])
        assert rc == 0

    def test_overwrite_semantics(self, run_dir, tmp_path):
        out = tmp_path / "ow"
        args = ["sample", "--ckpt", str(run_dir / "s2" / "checkpoints" / "stage2"),
                "--out", str(out), "--num-persons", "1", "--text", "a person",
                "--frames", "16", "--steps", "4"]
        assert main(args) == 0
        assert main(args) == 2
        assert main(args + ["--overwrite"]) == 0


class TestEval:
    def test_metrics_json(self, run_dir, tmp_path):
        # needs more test clips than evaluator feature dims for the FID fit
        data = tmp_path / "evaldata"
        assert main(["gen-data", "--out", str(data), "--n-samples", "60",
                     "--frames", "16", "--train-fraction", "0.4",
                     "--eval3", "1", "--eval4", "1", "--seed", "2"]) == 0
        out = tmp_path / "metrics"
        rc = main(["eval", "--ckpt", str(run_dir / "s2" / "checkpoints" / "stage2"),
                   "--data", str(data / "test.jsonl"),
                   "--train-data", str(data / "train.jsonl"),
                   "--out", str(out), "--reps", "2", "--steps", "4",
                   "--evaluator-epochs", "2", "--seed", "0"])
        assert rc == 0
        report = json.loads((out / "metrics.json").read_text())
        for key in ("fid", "r_precision_top1", "diversity", "mm_dist", "mmodality"):
            assert "mean" in report[key]
        assert (out / "checkpoints" / "evaluator" / "manifest.json").exists()

    def test_eval_requires_train_data_for_fresh_evaluator(self, run_dir, data_dir, tmp_path):
        rc = main(["eval", "--ckpt", str(run_dir / "s2" / "checkpoints" / "stage2"),
                   "--data", str(data_dir / "test.jsonl"),
                   "--out", str(tmp_path / "m2")])
        assert rc == 2


class TestOracle:
    def test_tiny_oracle_report(self, tmp_path):
        # a deliberately under-trained run: checks the command plumbing, not
        # the tolerances (the acceptance suite runs the reference recipe)
        out = tmp_path / "oracle"
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"stage1_epochs": 2, "stage2_epochs": 2}))
        rc = main(["oracle", "--out", str(out), "--n-samples", "500",
                   "--steps", "10", "--config", str(cfg)])
        assert rc == 0
        report = json.loads((out / "oracle_report.json").read_text())
        assert "empirical_slope" in report and "passed" in report
