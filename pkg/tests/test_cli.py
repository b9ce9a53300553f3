"""End-to-end subcommand behavior: files, determinism, guards."""

import os

import numpy as np
import pytest

from probsmooth.cli import main
from probsmooth.metrics import read_report

CONFIG = """\
seed: 5
dataset:
  classes: 3
  size: 16
  train_count: 64
  test_count: 32
model:
  stage_channels: [4, 8]
  stage_blocks: [1, 1]
  stage_downsample: [true, true]
  dropout_rate: 0.2
  smoothing:
    enabled: true
train:
  epochs: 2
  batch_size: 16
  milestones: [1]
  warmup_epochs: 1
eval:
  n: 4
  corruption_types: [gaussian_noise, brightness]
  severities: [1, 2]
  shift_steps: 3
  shift_count: 4
  shift_n: 2
analysis:
  hessian_batches: 2
  hessian_batch_size: 8
  loss_variance_n: [1, 2]
  loss_variance_trials: 4
  loss_variance_count: 16
  trace_n: 2
  trace_count: 4
  fft_count: 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(CONFIG)
    out = root / "train"
    code = main(["train", "--config", str(cfg_path), "--out", str(out)])
    assert code == 0
    return {"root": root, "config": str(cfg_path), "out": str(out),
            "checkpoint": str(out / "checkpoint.ckpt")}


class TestTrain:
    def test_outputs_exist(self, workspace):
        out = workspace["out"]
        assert os.path.exists(os.path.join(out, "checkpoint.ckpt"))
        assert os.path.exists(os.path.join(out, "train_log.csv"))
        assert os.path.exists(os.path.join(out, "train_summary.txt"))
        log = open(os.path.join(out, "train_log.csv")).read().splitlines()
        assert log[0] == "epoch,lr,train_nll,train_acc,val_nll,val_acc"
        assert len(log) == 3  # header + 2 epochs

    def test_rerun_identical(self, workspace, tmp_path):
        out2 = tmp_path / "again"
        assert main(["train", "--config", workspace["config"], "--out", str(out2)]) == 0
        for name in ("checkpoint.ckpt", "train_log.csv", "train_summary.txt"):
            a = open(os.path.join(workspace["out"], name), "rb").read()
            b = open(out2 / name, "rb").read()
            assert a == b, name

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_code_3(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        # an absurd weight decay overflows the weights to inf within a step or two
        text = CONFIG.replace("train:\n  epochs: 2",
                              "train:\n  weight_decay: 1e200\n  epochs: 2")
        cfg.write_text(text)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


class TestEval:
    def test_eval_writes_reports(self, workspace, tmp_path):
        out = tmp_path / "eval"
        code = main(["eval", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out)])
        assert code == 0
        report = read_report(out / "eval_report.txt")
        assert 0.0 <= report.accuracy <= 1.0
        assert report.nll >= 0.0
        assert report.metadata["n"] == 4
        assert os.path.exists(out / "predictions.csv")

    def test_eval_byte_identical(self, workspace, tmp_path):
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            assert main(["eval", "--config", workspace["config"],
                         "--checkpoint", workspace["checkpoint"], "--out", str(out)]) == 0
            outs.append(out)
        for fname in ("eval_report.txt", "eval_report.csv", "predictions.csv"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()

    def test_mismatched_checkpoint_rejected(self, workspace, tmp_path):
        cfg = tmp_path / "other.cfg"
        cfg.write_text(CONFIG.replace("dropout_rate: 0.2", "dropout_rate: 0.4"))
        code = main(["eval", "--config", str(cfg),
                     "--checkpoint", workspace["checkpoint"], "--out", str(tmp_path / "o")])
        assert code == 2

    def test_missing_checkpoint_flag(self, workspace, tmp_path):
        code = main(["eval", "--config", workspace["config"], "--out", str(tmp_path / "o")])
        assert code == 2


class TestEvalCorruption:
    def test_self_baseline_ratios_are_one(self, workspace, tmp_path):
        out1 = tmp_path / "c1"
        assert main(["eval-corruption", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out1)]) == 0
        report1 = read_report(out1 / "corruption_report.txt")
        assert set(report1.corruption) == {("gaussian_noise", 1), ("gaussian_noise", 2),
                                           ("brightness", 1), ("brightness", 2)}
        out2 = tmp_path / "c2"
        assert main(["eval-corruption", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out2),
                     "--baseline", str(out1 / "corruption_report.txt")]) == 0
        report2 = read_report(out2 / "corruption_report.txt")
        for family in ("ce", "cnll", "cece"):
            for value in report2.aggregates[family].values():
                assert value == 1.0
        assert report2.aggregates["mce"] == 1.0

    def test_foreign_baseline_rejected(self, workspace, tmp_path):
        out1 = tmp_path / "c1"
        assert main(["eval-corruption", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out1)]) == 0
        cfg = tmp_path / "other.cfg"
        cfg.write_text(CONFIG.replace("severities: [1, 2]", "severities: [1, 3]"))
        # different protocol: the baseline report must be refused
        code = main(["eval-corruption", "--config", str(cfg),
                     "--checkpoint", workspace["checkpoint"], "--out", str(tmp_path / "c3"),
                     "--baseline", str(out1 / "corruption_report.txt")])
        assert code == 2


class TestAnalysisCommands:
    def test_eval_consistency(self, workspace, tmp_path):
        out = tmp_path / "cons"
        assert main(["eval-consistency", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out)]) == 0
        report = read_report(out / "consistency_report.txt")
        assert 0.0 <= report.consistency <= 1.0
        assert report.cec >= 0.0

    def test_analyze_fft(self, workspace, tmp_path):
        out = tmp_path / "fft"
        assert main(["analyze-fft", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out)]) == 0
        diag = (out / "fft_diag.csv").read_text().splitlines()
        assert diag[0] == "layer,index,frequency,log_amplitude"
        assert any("stage0.smooth.out" in line for line in diag)
        spectrum = (out / "fft_spectrum.csv").read_text().splitlines()
        assert spectrum[0] == "layer,u,v,re,im"

    def test_analyze_variance(self, workspace, tmp_path):
        out = tmp_path / "var"
        assert main(["analyze-variance", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out)]) == 0
        lines = (out / "variance_trace.csv").read_text().splitlines()
        assert lines[0] == "layer,model_uncertainty,data_uncertainty"
        assert any(line.startswith("stage1.smooth.out,") for line in lines)

    def test_hessian_spectrum(self, workspace, tmp_path):
        out = tmp_path / "hess"
        assert main(["hessian-spectrum", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out)]) == 0
        lines = (out / "hessian_spectrum.csv").read_text().splitlines()
        assert lines[0] == "minibatch,rank,eigenvalue,converged"
        assert len(lines) == 3  # 2 minibatches x k=1

    def test_hessian_spectrum_matches_dense_oracle_end_to_end(self, tmp_path):
        # a deterministic 16-parameter model so a full Hessian is cheap
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(
            "seed: 4\n"
            "dataset:\n  classes: 2\n  size: 16\n  train_count: 16\n  test_count: 8\n"
            "model:\n  stage_channels: [1]\n  stage_blocks: [1]\n"
            "  stage_downsample: [true]\n  dropout_rate: 0.0\n"
            "train:\n  epochs: 1\n  batch_size: 8\n  milestones: []\n"
            "analysis:\n  hessian_batches: 1\n  hessian_batch_size: 8\n"
        )
        out_train = tmp_path / "train"
        assert main(["train", "--config", str(cfg), "--out", str(out_train)]) == 0
        ckpt = str(out_train / "checkpoint.ckpt")
        out = tmp_path / "hess"
        assert main(["hessian-spectrum", "--config", str(cfg),
                     "--checkpoint", ckpt, "--out", str(out)]) == 0
        row = (out / "hessian_spectrum.csv").read_text().splitlines()[1]
        _, _, lam_txt, conv = row.split(",")
        assert conv == "1"
        top1 = float(lam_txt)

        # dense finite-difference Hessian of the identical subcommand loss
        from oracles import dense_hessian
        from probsmooth.analysis import regularized_loss
        from probsmooth.cli import load_datasets
        from probsmooth.config import load_file
        from probsmooth.data import augment
        from probsmooth.models import load_checkpoint
        from probsmooth.rng import stream

        cfg_d = load_file(cfg)
        train_ds, _ = load_datasets(cfg_d)
        model = load_checkpoint(ckpt).set_mode("mc_eval")
        images = augment(train_ds.images[:8], cfg_d["train"]["augment_pad"],
                         stream(cfg_d["seed"], "hessian-augment", 0))
        labels = train_ds.labels[:8]
        params = model.parameters()
        shapes = [p.shape for p in params]

        def loss_flat(flat):
            off = 0
            for p, s in zip(params, shapes):
                size = int(np.prod(s))
                p.data = flat[off:off + size].reshape(s)
                off += size
            return regularized_loss(model, images, labels,
                                    cfg_d["analysis"]["l2_coeff"]).item()

        flat0 = np.concatenate([p.data.ravel().copy() for p in params])
        try:
            dense = dense_hessian(loss_flat, flat0)
        finally:
            loss_flat(flat0)  # restore the weights
        want = np.linalg.eigvalsh(dense).max()
        assert abs(top1 - want) / abs(want) < 1e-4

    def test_loss_variance(self, workspace, tmp_path):
        out = tmp_path / "lv"
        assert main(["loss-variance", "--config", workspace["config"],
                     "--checkpoint", workspace["checkpoint"], "--out", str(out)]) == 0
        lines = (out / "loss_variance.csv").read_text().splitlines()
        assert lines[0] == "ensemble_size,loss_variance"
        assert len(lines) == 3


class TestErrors:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed: 1\nwhatever: 2\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
