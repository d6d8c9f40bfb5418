"""Command-line verbs: artifacts, exit codes and byte-level determinism."""

import hashlib
import json
import os

import numpy as np
import pytest

from clipsr.checkpoint import read_manifest
from clipsr.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from clipsr.imaging import ImageBuffer, read_image, write_image

TINY_INI = """\
[model]
channels = 4
d_text = 8
d_vit = 16
text_blocks = 1
vit_blocks = 1
clip_size = 32
patch = 4
n_prompts = 2

[train]
batch_size = 2
probe_size = 2

[clip]
clip_batch = 4
clip_steps = 3
"""


def digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_INI)
    assert main(["dataset-gen", "--out", str(root / "data"), "--count", "20", "--seed", "1"]) == EXIT_OK
    assert main(["pretrain-clip", "--data", str(root / "data"), "--config", str(cfg),
                 "--out-checkpoint", str(root / "clip.ckpt")]) == EXIT_OK
    assert main(["train-sr", "--data", str(root / "data"), "--clip-checkpoint", str(root / "clip.ckpt"),
                 "--config", str(cfg), "--steps", "3", "--out", str(root / "sr.ckpt")]) == EXIT_OK
    return root, cfg


class TestDatasetGen:
    def test_count_and_manifest(self, tmp_path, capsys):
        assert main(["dataset-gen", "--out", str(tmp_path / "d"), "--count", "100"]) == EXIT_OK
        m = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert m["count"] == 100 and len(m["entries"]) == 100
        assert m["splits"] == {"train": 80, "val": 10, "test": 10}
        assert "wrote 100 pairs" in capsys.readouterr().out

    def test_bad_count(self, tmp_path):
        assert main(["dataset-gen", "--out", str(tmp_path / "d"), "--count", "0"]) == EXIT_VALIDATION

    def test_bad_splits(self, tmp_path):
        assert main(["dataset-gen", "--out", str(tmp_path / "d"), "--count", "4", "--splits", "x"]) == EXIT_VALIDATION

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["dataset-gen", "--out", str(blocker / "d"), "--count", "2"]) == EXIT_RUNTIME


class TestPretrain:
    def test_artifacts(self, work):
        root, _ = work
        meta = read_manifest(root / "clip.ckpt")["meta"]
        assert meta["kind"] == "clip" and meta["frozen"] is True
        lines = (root / "clip.ckpt.loss.csv").read_text().splitlines()
        assert lines[0] == "step,loss" and len(lines) == 4

    def test_missing_data(self, tmp_path):
        assert main(["pretrain-clip", "--data", str(tmp_path / "none"),
                     "--out-checkpoint", str(tmp_path / "c.ckpt")]) == EXIT_RUNTIME


class TestTrainSR:
    def test_log_format(self, work):
        root, _ = work
        lines = (root / "sr.ckpt.loss.csv").read_text().splitlines()
        assert lines[0] == "step,rec,per,adv,disc,total"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "2"]
        assert all(len(ln.split(",")) == 6 for ln in lines)

    def test_text_path_needs_clip(self, work, tmp_path):
        root, cfg = work
        code = main(["train-sr", "--data", str(root / "data"), "--config", str(cfg), "--steps", "1",
                     "--out", str(tmp_path / "x.ckpt")])
        assert code == EXIT_VALIDATION

    def test_variant1_without_clip(self, work, tmp_path):
        root, cfg = work
        code = main(["train-sr", "--data", str(root / "data"), "--config", str(cfg), "--steps", "1",
                     "--set", "use_text=false", "--out", str(tmp_path / "v1.ckpt")])
        assert code == EXIT_OK
        assert read_manifest(tmp_path / "v1.ckpt")["meta"]["variant"] == "1"

    def test_clip_mismatch_rejected_before_training(self, work, tmp_path):
        root, cfg = work
        code = main(["train-sr", "--data", str(root / "data"), "--clip-checkpoint", str(root / "clip.ckpt"),
                     "--config", str(cfg), "--set", "d_text=16", "--steps", "1", "--out", str(tmp_path / "x.ckpt")])
        assert code == EXIT_VALIDATION
        assert not os.path.exists(tmp_path / "x.ckpt")

    def test_resume_continues_log(self, work, tmp_path):
        root, cfg = work
        common = ["train-sr", "--data", str(root / "data"), "--clip-checkpoint", str(root / "clip.ckpt"),
                  "--config", str(cfg)]
        assert main(common + ["--steps", "2", "--out", str(tmp_path / "a.ckpt")]) == EXIT_OK
        assert main(common + ["--steps", "3", "--resume", str(tmp_path / "a.ckpt"),
                              "--out", str(tmp_path / "a.ckpt")]) == EXIT_OK
        resumed = (tmp_path / "a.ckpt.loss.csv").read_text().splitlines()
        assert resumed == (root / "sr.ckpt.loss.csv").read_text().splitlines()
        assert digest(tmp_path / "a.ckpt") == digest(root / "sr.ckpt")

    def test_resume_config_mismatch(self, work, tmp_path):
        root, cfg = work
        code = main(["train-sr", "--data", str(root / "data"), "--config", str(cfg), "--steps", "4",
                     "--set", "use_vit=false", "--clip-checkpoint", str(root / "clip.ckpt"),
                     "--resume", str(root / "sr.ckpt"), "--out", str(tmp_path / "b.ckpt")])
        assert code == EXIT_VALIDATION


class TestInfer:
    def lr_image(self, root, size=16):
        path = root / f"lr{size}.ppm"
        write_image(path, ImageBuffer(np.random.default_rng(0).random((size, size, 3))))
        return path

    def test_writes_scaled_image(self, work, tmp_path, capsys):
        root, _ = work
        out = tmp_path / "sr.ppm"
        gt = tmp_path / "gt.ppm"
        write_image(gt, ImageBuffer(np.zeros((64, 64, 3))))
        code = main(["infer", "--checkpoint", str(root / "sr.ckpt"), "--image", str(self.lr_image(tmp_path)),
                     "--caption", "a red square on a blue background", "--scale", "4", "--out", str(out),
                     "--gt", str(gt)])
        assert code == EXIT_OK
        img = read_image(out)
        assert (img.height, img.width) == (64, 64)
        text = capsys.readouterr().out
        assert "psnr = " in text and "ssim = " in text

    def test_byte_identical(self, work, tmp_path):
        root, _ = work
        args = ["infer", "--checkpoint", str(root / "sr.ckpt"), "--image", str(self.lr_image(tmp_path)),
                "--caption", "a red square on a blue background", "--scale", "4"]
        assert main(args + ["--out", str(tmp_path / "a.ppm")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b.ppm")]) == EXIT_OK
        assert digest(tmp_path / "a.ppm") == digest(tmp_path / "b.ppm")

    @pytest.mark.parametrize("size, scale", [(16, 8), (32, 4), (8, 4)])
    def test_dim_scale_mismatch(self, work, tmp_path, size, scale):
        root, _ = work
        code = main(["infer", "--checkpoint", str(root / "sr.ckpt"), "--image", str(self.lr_image(tmp_path, size)),
                     "--caption", "a red square", "--scale", str(scale), "--out", str(tmp_path / "o.ppm")])
        assert code == EXIT_VALIDATION

    def test_caption_required(self, work, tmp_path):
        root, _ = work
        code = main(["infer", "--checkpoint", str(root / "sr.ckpt"), "--image", str(self.lr_image(tmp_path)),
                     "--scale", "4", "--out", str(tmp_path / "o.ppm")])
        assert code == EXIT_VALIDATION

    def test_malformed_image(self, work, tmp_path):
        root, _ = work
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P6\n16 16\n255\n\x00")
        code = main(["infer", "--checkpoint", str(root / "sr.ckpt"), "--image", str(bad),
                     "--caption", "a", "--scale", "4", "--out", str(tmp_path / "o.ppm")])
        assert code == EXIT_VALIDATION

    def test_corrupt_checkpoint(self, work, tmp_path):
        root, _ = work
        data = (root / "sr.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(data[:-10])
        code = main(["infer", "--checkpoint", str(tmp_path / "c.ckpt"), "--image", str(self.lr_image(tmp_path)),
                     "--caption", "a", "--scale", "4", "--out", str(tmp_path / "o.ppm")])
        assert code == EXIT_RUNTIME


class TestEval:
    def test_report_twice_identical(self, work, tmp_path, capsys):
        root, _ = work
        args = ["eval", "--checkpoint", str(root / "sr.ckpt"), "--data", str(root / "data"), "--scale", "4"]
        assert main(args + ["--out", str(tmp_path / "a.txt")]) == EXIT_OK
        assert main(args + ["--out", str(tmp_path / "b.txt")]) == EXIT_OK
        a = (tmp_path / "a.txt").read_text()
        assert a == (tmp_path / "b.txt").read_text()
        assert "[model]" in a and "[bicubic]" in a and "count = 2" in a

    def test_empty_split(self, work, tmp_path):
        root, _ = work
        assert main(["dataset-gen", "--out", str(tmp_path / "d"), "--count", "4", "--splits", "100/0/0"]) == EXIT_OK
        code = main(["eval", "--checkpoint", str(root / "sr.ckpt"), "--data", str(tmp_path / "d")])
        assert code == EXIT_VALIDATION

    def test_scale_mismatch(self, work):
        root, _ = work
        code = main(["eval", "--checkpoint", str(root / "sr.ckpt"), "--data", str(root / "data"), "--scale", "8"])
        assert code == EXIT_VALIDATION


class TestConfigFlags:
    def test_bad_override(self, work, tmp_path):
        root, cfg = work
        code = main(["pretrain-clip", "--data", str(root / "data"), "--config", str(cfg), "--set", "nonsense",
                     "--out-checkpoint", str(tmp_path / "c.ckpt")])
        assert code == EXIT_VALIDATION

    def test_invalid_scale(self, work, tmp_path):
        root, cfg = work
        code = main(["train-sr", "--data", str(root / "data"), "--config", str(cfg), "--set", "scale=3",
                     "--out", str(tmp_path / "c.ckpt")])
        assert code == EXIT_VALIDATION
