import json

import pytest

from uniperc import unicli
from uniperc.netzoo import state_checksum
from uniperc.trainflow import load_student

TINY_TRAIN = ["--scale", "0.00005", "--batch-k", "1"]


def run(*argv):
    return unicli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--seed", 2, "--scenes", 5, "--out", out) == 0
    return out


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenData:
    def test_layout(self, dataset):
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert len(manifest["splits"]["train"]) == 4 and len(manifest["splits"]["val"]) == 1
        cfg = json.loads((dataset / "config.json").read_text())
        assert cfg["seed"] == 2 and cfg["scenes"] == 5 and cfg["command"] == "gen-data"

    def test_deterministic_and_creates_dirs(self, tmp_path):
        a, b = tmp_path / "x" / "a", tmp_path / "y" / "b"
        assert run("gen-data", "--seed", 7, "--scenes", 2, "--out", a) == 0
        assert run("gen-data", "--seed", 7, "--scenes", 2, "--out", b) == 0
        ta, tb = _tree(a), _tree(b)
        ta.pop("config.json"), tb.pop("config.json")
        assert ta == tb

    def test_zero_scenes_is_usage_error(self, tmp_path, capsys):
        assert run("gen-data", "--scenes", 0, "--out", tmp_path) == 2
        assert "positive" in capsys.readouterr().err

    def test_missing_out(self):
        assert run("gen-data", "--scenes", 1) == 2

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UNIPERC_SEED", "11")
        assert run("gen-data", "--scenes", 1, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "config.json").read_text())["seed"] == 11
        assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 11


class TestParser:
    def test_unknown_eval_target(self):
        with pytest.raises(SystemExit) as e:
            run("eval", "bogus", "--out", "x")
        assert e.value.code == 2

    def test_eval_without_data(self, tmp_path):
        assert run("eval", "depth", "--out", tmp_path) == 2

    def test_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit):
            run("--help")
        out = capsys.readouterr().out
        for cmd in ("gen-data", "train", "distill", "eval-depth", "eval-seg", "eval-steering", "grad-check"):
            assert cmd in out


@pytest.fixture(scope="module")
def stage1(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    assert run("train", "--data", dataset, "--stages", 1, "--out", out, "--preset", "desk", *TINY_TRAIN) == 0
    return out


class TestTrain:
    def test_stage_one_only(self, stage1):
        assert sorted(p.name for p in (stage1 / "checkpoints").iterdir()) == ["stage1.ckpt"]
        assert not (stage1 / "teacher.ckpt").exists()
        cfg = json.loads((stage1 / "config.json").read_text())
        assert cfg["train"]["stages"] == [1] and cfg["train"]["lr"] == 3e-4

    def test_config_rerun_reproduces(self, stage1, tmp_path):
        summary = json.loads((stage1 / "reports" / "train_summary.json").read_text())
        assert run("train", "--config", stage1 / "config.json", "--out", tmp_path) == 0
        again = json.loads((tmp_path / "reports" / "train_summary.json").read_text())
        assert again["checksum"] == summary["checksum"]
        assert state_checksum(load_student(str(tmp_path / "checkpoints" / "stage1.ckpt"))) == summary["checksum"]

    def test_no_distill_mapping(self, dataset, tmp_path):
        assert run("train", "--data", dataset, "--stages", "1,2", "--no-distill", "--out", tmp_path, *TINY_TRAIN) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())["train"]
        assert cfg["distill"] is False and cfg["weights"]["distil"] == 0.0
        assert not (tmp_path / "teacher.ckpt").exists()
        summary = json.loads((tmp_path / "reports" / "train_summary.json").read_text())
        assert all(s["frozen_unchanged"] for s in summary["stages"])

    def test_distilled_run_trains_teacher(self, dataset, tmp_path):
        assert run("train", "--data", dataset, "--stages", "1,2", "--out", tmp_path, *TINY_TRAIN) == 0
        assert (tmp_path / "teacher.ckpt").exists()

    def test_bad_stage(self, dataset, tmp_path):
        assert run("train", "--data", dataset, "--stages", "5", "--out", tmp_path) == 1

    def test_missing_data(self, tmp_path):
        assert run("train", "--out", tmp_path) == 2


class TestEval:
    def test_oracle_depth_is_perfect(self, dataset, tmp_path):
        assert run("eval-depth", "--data", dataset, "--oracle", "--out", tmp_path) == 0
        m = json.loads((tmp_path / "depth_metrics.json").read_text())
        assert m["abs_rel"] == 0 and m["rmse"] == 0 and m["delta1"] == 1
        header = (tmp_path / "depth_metrics.csv").read_text().splitlines()[0]
        assert header.split(",")[:2] == ["abs_rel", "sq_rel"]

    def test_depth_and_seg_from_checkpoint(self, dataset, tmp_path):
        ckpt_dir = tmp_path / "run"
        assert run("train", "--data", dataset, "--stages", 1, "--out", ckpt_dir, *TINY_TRAIN) == 0
        ckpt = ckpt_dir / "checkpoints" / "stage1.ckpt"
        assert run("eval", "depth", "--data", dataset, "--checkpoint", ckpt, "--out", tmp_path / "d") == 0
        assert 0 <= json.loads((tmp_path / "d" / "depth_metrics.json").read_text())["delta1"] <= 1
        assert run("eval-seg", "--data", dataset, "--checkpoint", ckpt, "--out", tmp_path / "s") == 0
        seg = json.loads((tmp_path / "s" / "seg_metrics.json").read_text())
        assert 0 <= seg["iou"] <= 1 and 0 <= seg["pq"] <= 1

    def test_steering_ten_folds(self, tmp_path, capsys):
        assert run("eval-steering", "--random-init", "--sequences", 10, "--steps", 2, "--out", tmp_path) == 0
        report = json.loads((tmp_path / "reports" / "steering_cv.json").read_text())
        assert report["encoder_unchanged"] is True and report["frozen"] is True
        assert sum(line.startswith("fold ") for line in capsys.readouterr().out.splitlines()) == 10
        assert (tmp_path / "reports" / "steering_cv.csv").read_text().startswith("model,")

    def test_steering_needs_ten(self, tmp_path):
        assert run("eval-steering", "--random-init", "--sequences", 9, "--out", tmp_path) == 2

    def test_steering_needs_checkpoint(self, tmp_path):
        assert run("eval-steering", "--sequences", 10, "--out", tmp_path) == 2


class TestGradCheck:
    def test_all_pass(self, tmp_path, capsys):
        assert run("grad-check", "--out", tmp_path) == 0
        lines = capsys.readouterr().out.splitlines()
        assert sum(line.startswith("PASS") for line in lines) == 16
        assert len(json.loads((tmp_path / "grad_check.json").read_text())["results"]) == 16

    def test_fault_fails(self, capsys):
        assert run("grad-check", "--checks", "dice_placeholder") == 2
        assert run("grad-check", "--checks", "seg_mask_dice", "--inject-fault", "seg_mask_dice") == 1
        assert "FAIL seg_mask_dice" in capsys.readouterr().out
