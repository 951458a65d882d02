import os

import numpy as np
import pytest

from apvt.cli import main


def run(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestParams:
    def test_known_variant_prints_audit(self, capsys):
        code, out, _ = run(capsys, ["params", "--variant", "apvt-8-2x-a"])
        assert code == 0
        assert "total" in out
        assert "stage1.encoders" in out
        assert "reference total 5.52M" in out

    def test_unknown_variant(self, capsys):
        code, _, err = run(capsys, ["params", "--variant", "no-such-model"])
        assert code != 0
        assert "unknown variant" in err

    def test_explicit_dims_without_variant(self, capsys):
        code, out, _ = run(capsys, ["params", "--depths", "1,1,1,1", "--paths", "2",
                                    "--head-dim", "8"])
        assert code == 0
        assert "total" in out

    def test_missing_dims_without_variant(self, capsys):
        code, _, err = run(capsys, ["params", "--paths", "2"])
        assert code != 0
        assert "explicit dimensions" in err

    def test_variant_with_override(self, capsys):
        code, out, _ = run(capsys, ["params", "--variant", "apvt-8-2x-a", "--classes", "100"])
        assert code == 0
        assert "classes 100" in out


class TestGradcheck:
    def test_micro_suite_passes(self, capsys):
        code, out, _ = run(capsys, ["gradcheck", "--depth", "1", "--paths", "2",
                                    "--head-dim", "8"])
        assert code == 0
        for block in ("conv_ffn", "encoder_path", "group_encoder", "sra",
                      "patch_embed", "micro_model"):
            assert block in out
        assert "FAIL" not in out


class TestSelftest:
    def test_all_checks_pass(self, capsys):
        code, out, _ = run(capsys, ["selftest"])
        assert code == 0
        for name in ("merge_additivity", "msa_sra_equivalence", "stride_contract",
                     "checkpoint_roundtrip", "lr_schedule"):
            assert f"selftest {name}: ok" in out
        assert "all checks passed" in out


class TestTrainEval:
    def test_train_then_eval(self, capsys, cifar_dir, tmp_path):
        ckpt = str(tmp_path / "m.apvt")
        log = str(tmp_path / "m.log")
        code, out, _ = run(capsys, [
            "train", "--depths", "1,1,1,1", "--paths", "2", "--head-dim", "8",
            "--data-dir", cifar_dir, "--limit", "64", "--epochs", "2",
            "--batch", "32", "--lr", "1e-3", "--ckpt", ckpt, "--log", log,
        ])
        assert code == 0
        assert os.path.exists(ckpt) and os.path.exists(log)
        assert "epoch 1" in out

        code, out, _ = run(capsys, [
            "eval", "--depths", "1,1,1,1", "--paths", "2", "--head-dim", "8",
            "--data-dir", cifar_dir, "--split", "test", "--limit", "50",
            "--ckpt", ckpt,
        ])
        assert code == 0
        assert "top1" in out and "err" in out

    def test_train_missing_data_dir(self, capsys, tmp_path):
        code, _, err = run(capsys, [
            "train", "--variant", "apvt-8-2x-a", "--data-dir", str(tmp_path),
            "--epochs", "1",
        ])
        assert code != 0
        assert "missing" in err

    def test_idempotent_params(self, capsys):
        a = run(capsys, ["params", "--variant", "apvt-8-4x-a"])
        b = run(capsys, ["params", "--variant", "apvt-8-4x-a"])
        assert a == b


class TestBench:
    def test_bench_reports_stats(self, capsys):
        code, out, _ = run(capsys, ["bench", "--depths", "1,1,1,1", "--paths", "1",
                                    "--head-dim", "8", "--batch", "2", "--warmup", "0",
                                    "--iters", "2"])
        assert code == 0
        assert "mean" in out and "median" in out and "std" in out


class TestUsage:
    def test_unknown_subcommand_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code != 0

    def test_no_subcommand_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code != 0

    def test_f64_flag(self, capsys):
        code, out, _ = run(capsys, ["params", "--variant", "apvt-8-2x-a", "--f64"])
        assert code == 0
