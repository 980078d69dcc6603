import subprocess
import sys

import numpy as np
import pytest

from isacir import fileio
from isacir.cli import main

TINY = ["--profile", "tiny"]


def run(out, *args):
    return main([args[0], *TINY, "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "nested" / "dir"
    assert run(out, "gen-data") == 0
    assert run(out, "train") == 0
    assert run(out, "embed-gallery", "--checkpoint", str(out / "checkpoint.isac")) == 0
    assert run(out, "eval", "--gallery", str(out / "gallery.isae"), "--baselines") == 0
    return out


class TestPipeline:
    def test_outputs_exist(self, workdir):
        for name in ("dataset.jsonl", "checkpoint.isac", "loss.csv", "gallery.isae", "metrics.txt"):
            assert (workdir / name).stat().st_size > 0, name

    def test_loss_table(self, workdir):
        lines = (workdir / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,gcd,lar,total,lr" and len(lines) == 3

    def test_metrics_file(self, workdir):
        metrics, cfg = fileio.decode_metrics((workdir / "metrics.txt").read_text())
        assert {"model.recall@1", "model.map@50", "text-only.avg_recall"} <= set(metrics)
        assert cfg["data.n_train"] == "96"

    def test_rerun_is_byte_identical(self, workdir, tmp_path):
        again = tmp_path / "again"
        assert run(again, "gen-data") == 0
        assert run(again, "train") == 0
        assert run(again, "embed-gallery") == 0
        assert run(again, "eval", "--gallery", str(again / "gallery.isae"), "--baselines") == 0
        for name in ("dataset.jsonl", "checkpoint.isac", "loss.csv", "gallery.isae", "metrics.txt"):
            assert (again / name).read_bytes() == (workdir / name).read_bytes(), name

    def test_gallery_file_matches_rebuilt_index(self, workdir, capsys):
        assert run(workdir, "eval") == 0
        rebuilt = capsys.readouterr().out
        assert run(workdir, "eval", "--gallery", str(workdir / "gallery.isae")) == 0
        assert capsys.readouterr().out == rebuilt

    def test_export_attention(self, workdir):
        assert run(workdir, "export-attention", "--image-id", "g0003") == 0
        lines = (workdir / "attention_g0003.txt").read_text().splitlines()
        assert lines[0].startswith("# image g0003 tokens 6 pixels 64")
        rows = np.array([[float(x) for x in line.split()] for line in lines[1:]])
        assert rows.shape == (6, 64)
        np.testing.assert_allclose(rows.sum(axis=0), 1.0, atol=1e-5)

    def test_symmetric_and_ablation_flags(self, workdir, tmp_path):
        out = tmp_path / "sym"
        assert run(out, "train", "--data", str(workdir / "dataset.jsonl"), "--mode", "symmetric",
                   "--loss", "gcd-only", "--token-length", "2") == 0
        ckpt = fileio.read_checkpoint(out / "checkpoint.isac")
        assert ckpt.config["model.mode"] == "symmetric" and ckpt.config["model.token_length"] == 2
        assert ckpt.config["loss.lar_weight"] == 0.0 and ckpt.params["W"].shape[0] == 2


class TestErrors:
    def test_unknown_image_id(self, workdir, capsys):
        assert run(workdir, "export-attention", "--image-id", "nope") == 1
        assert "unknown image id" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        assert run(tmp_path, "eval") == 1

    def test_missing_data_file(self, tmp_path):
        assert run(tmp_path, "train", "--data", str(tmp_path / "absent.jsonl")) == 1

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "checkpoint.isac").write_bytes(b"garbage")
        assert run(tmp_path, "eval") == 1

    def test_bad_override_is_usage_error(self, tmp_path, capsys):
        assert run(tmp_path, "gen-data", "--set", "train.epochs=many") == 2
        assert "train.epochs" in capsys.readouterr().err

    def test_unknown_key_is_usage_error(self, tmp_path):
        assert run(tmp_path, "gen-data", "--set", "data.colour=red") == 2

    @pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--profile", "huge"], ["gradcheck", "--seeds", "a"],
                                      ["export-attention"]])
    def test_argparse_errors_exit_2(self, argv):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


class TestGradcheckCommand:
    def test_pass_and_corrupted_fail(self, tmp_path, capsys):
        args = ["--seeds", "0", "--max-coords", "2"]
        assert run(tmp_path, "gradcheck", *args) == 0
        assert "PASS" in capsys.readouterr().out
        assert run(tmp_path, "gradcheck", *args, "--corrupt", "W") == 1
        assert "FAIL" in capsys.readouterr().out


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "isacir.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("gen-data", "train", "embed-gallery", "eval", "gradcheck", "export-attention"):
        assert command in proc.stdout
