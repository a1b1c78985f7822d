import json

import numpy as np
import pytest
from PIL import Image

from precipdiff import pipeline
from precipdiff.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from precipdiff.gridfile import read_grid, write_grid
from precipdiff.metrics import parse_report

TINY_FLAGS = [
    "--L", "2", "--H", "8", "--W", "16", "--T", "10", "--base-channels", "4", "--batch", "2",
    "--n-train", "4", "--n-eval", "2", "--K", "2", "--sampler-steps", "4", "--swath-width", "4",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["gen-data", "--out", str(root / "data"), *TINY_FLAGS]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "model"), "--epochs", "1",
                 "--config", str(root / "data" / "config.json")]) == EXIT_OK
    return root


class TestPipelineCommands:
    def test_gen_data_layout(self, workspace):
        train = sorted(p.name for p in (workspace / "data" / "train").glob("*.hdr"))
        assert len(train) == 4
        g = read_grid(workspace / "data" / "eval" / "seq_0000")
        assert g.dims == (10, 2, 8, 16) and g.channels[:2] == ["precip", "obs_mask"]

    def test_train_outputs(self, workspace):
        assert len(pipeline.read_loss_log(workspace / "model" / "loss.log")) == 1
        assert json.loads((workspace / "model" / "config.json").read_text())["epochs"] == 1

    def test_resume(self, workspace):
        ckpt = workspace / "model" / "checkpoint.ckpt"
        out = workspace / "resumed"
        rc = main(["train", "--data", str(workspace / "data"), "--out", str(out), "--resume", str(ckpt),
                   "--config", str(workspace / "model" / "config.json"), "--epochs", "2"])
        assert rc == EXIT_OK
        losses = pipeline.read_loss_log(out / "loss.log")
        assert len(losses) == 2 and losses[1] <= 2 * losses[0]

    def test_sample_evaluate_render(self, workspace, capsys):
        ckpt = workspace / "model" / "checkpoint.ckpt"
        assert main(["sample", "--checkpoint", str(ckpt), "--data", str(workspace / "data"),
                     "--out", str(workspace / "pred")]) == EXIT_OK
        g = read_grid(workspace / "pred" / "seq_0001")
        assert g.channels == ["member_00", "member_01", "mean"]
        truth = read_grid(workspace / "data" / "eval" / "seq_0001").data
        obs = truth[1] == 1
        for k in range(3):
            np.testing.assert_array_equal(g.data[k][obs], truth[0][obs])

        report = workspace / "report.jsonl"
        assert main(["evaluate", "--pred", str(workspace / "pred"), "--data", str(workspace / "data"),
                     "--out", str(report)]) == EXIT_OK
        rep = parse_report(report.read_text().splitlines())
        assert len(rep.windows) == 2 and set(rep.summary) >= {"rmse", "ms_ssim", "tg_rmse", "bdi", "pearson"}

        assert main(["render", "--input", str(workspace / "pred" / "seq_0001.hdr"), "--channel", "mean",
                     "--out", str(workspace / "img")]) == EXIT_OK
        imgs = sorted((workspace / "img").glob("*.png"))
        assert len(imgs) == 2 and Image.open(imgs[0]).size == (16, 8)

    def test_evaluate_truth_against_itself(self, workspace, tmp_path):
        pred = tmp_path / "pred"
        for h in (workspace / "data" / "eval").glob("*.hdr"):
            g = read_grid(h)
            write_grid(pred / h.stem, g.data[:1], ["mean"])
        out = tmp_path / "r.jsonl"
        assert main(["evaluate", "--pred", str(pred), "--data", str(workspace / "data"), "--out", str(out)]) == 0
        rep = parse_report(out.read_text().splitlines())
        for m, v in (("rmse", 0.0), ("ms_ssim", 1.0), ("bdi", 0.0)):
            assert rep.summary[m]["mean"] == v and rep.summary[m]["ci_lo"] == rep.summary[m]["ci_hi"]

    def test_baselines(self, workspace):
        for method in ("tli", "tli-lf"):
            out = workspace / f"base_{method}"
            assert main(["baseline", "--method", method, "--data", str(workspace / "data"), "--out", str(out)]) == 0
            assert len(list(out.glob("*.hdr"))) == 2

    def test_ablate(self, workspace):
        out = workspace / "ablate.json"
        rc = main(["ablate", "--checkpoint", str(workspace / "model" / "checkpoint.ckpt"),
                   "--data", str(workspace / "data"), "--out", str(out), "--K", "1", "--sampler-steps", "2"])
        assert rc == EXIT_OK
        doc = json.loads(out.read_text())
        assert doc["groups"] == ["masked_precip", "mask", "ir", "time", "topo", "lat", "lon"]
        assert doc["signs"]["ms_ssim"] == -1.0


class TestExitCodes:
    def test_config_error(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--H", "12"]) == EXIT_CONFIG
        assert main(["gen-data", "--out", str(tmp_path), "--lr", "fast"]) == EXIT_CONFIG

    def test_threads_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PRECIPDIFF_THREADS", "zero")
        assert main(["gen-data", "--out", str(tmp_path), *TINY_FLAGS]) == EXIT_CONFIG
        monkeypatch.setenv("PRECIPDIFF_THREADS", "1")
        assert main(["gen-data", "--out", str(tmp_path), *TINY_FLAGS]) == EXIT_OK

    def test_data_error(self, tmp_path, workspace):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m"), *TINY_FLAGS]) == EXIT_DATA
        # grid of the files differs from the configured one
        assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m"),
                     *TINY_FLAGS, "--W", "24"]) == EXIT_DATA

    def test_misaligned_windows(self, tmp_path, workspace):
        (tmp_path / "pred").mkdir()
        assert main(["evaluate", "--pred", str(tmp_path / "pred"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "r.jsonl")]) == EXIT_DATA

    def test_numeric_failure(self, tmp_path, workspace):
        with np.errstate(all="ignore"):
            rc = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "m"), *TINY_FLAGS,
                       "--epochs", "3", "--lr", "1e300"])
        assert rc == EXIT_NUMERIC
