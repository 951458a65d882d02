import math
import os

import numpy as np
import pytest

from apvt import tensor as T
from apvt.data_io import Dataset, load_cifar10
from apvt.model import build_model
from apvt.training import (AdamW, TrainRecipe, benchmark_inference, decays_weight,
                           evaluate, lr_at_epoch, train)

from conftest import micro_config


def single_param_adamw(value, recipe):
    p = T.tensor([value], requires_grad=True, dtype=np.float64)
    opt = AdamW([("x.w", p)], recipe)
    return p, opt


class TestAdamW:
    def test_hand_computed_first_step(self):
        # w=1, g=1, lr=1e-3, wd=0: bias-corrected m_hat = v_hat = 1,
        # so the update magnitude is lr/(1+eps)
        recipe = TrainRecipe(weight_decay=0.0)
        p, opt = single_param_adamw(1.0, recipe)
        p.grad = np.array([1.0])
        opt.step(lr=1e-3)
        np.testing.assert_allclose(p.data, [1.0 - 1e-3 / (1.0 + 1e-8)], rtol=1e-9)

    def test_decay_only_step(self):
        recipe = TrainRecipe(weight_decay=0.05)
        p, opt = single_param_adamw(2.0, recipe)
        p.grad = np.array([0.0])
        opt.step(lr=1e-3)
        np.testing.assert_allclose(p.data, [2.0 * (1.0 - 1e-3 * 0.05)], rtol=1e-12)

    def test_zero_grad_zero_decay_leaves_param(self):
        recipe = TrainRecipe(weight_decay=0.0)
        p, opt = single_param_adamw(2.0, recipe)
        p.grad = np.array([0.0])
        opt.step(lr=1e-3)
        np.testing.assert_array_equal(p.data, [2.0])
        assert opt.t == 1

    def test_geometric_shrink_under_zero_grads(self):
        recipe = TrainRecipe(weight_decay=0.05)
        p, opt = single_param_adamw(1.0, recipe)
        for _ in range(5):
            p.grad = np.array([0.0])
            opt.step(lr=1e-3)
        np.testing.assert_allclose(p.data, [(1.0 - 1e-3 * 0.05) ** 5], rtol=1e-12)

    def test_nonfinite_grad_names_parameter(self):
        recipe = TrainRecipe()
        p, opt = single_param_adamw(1.0, recipe)
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="x.w"):
            opt.step(lr=1e-3)

    def test_step_touches_exactly_grad_bearing_params(self):
        recipe = TrainRecipe(weight_decay=0.0)
        a = T.tensor([1.0], requires_grad=True, dtype=np.float64)
        b = T.tensor([1.0], requires_grad=True, dtype=np.float64)
        opt = AdamW([("a.w", a), ("b.w", b)], recipe)
        a.grad = np.array([0.5])
        b.grad = np.array([0.0])
        opt.step(lr=1e-3)
        assert a.data[0] != 1.0
        assert b.data[0] == 1.0

    def test_decay_exclusions(self):
        assert decays_weight("stage1.block0.path0.attn.q.w")
        assert decays_weight("head.w")
        assert not decays_weight("head.b")
        assert not decays_weight("stage1.pos")
        assert not decays_weight("norm.g")
        assert not decays_weight("stage1.patch.norm.b")


class TestLRSchedule:
    @pytest.mark.parametrize("epoch,want", [
        (0, 5e-4), (15, 5e-4), (29, 5e-4),
        (30, 5e-5), (45, 5e-5), (59, 5e-5),
        (60, 5e-6), (90, 5e-7),
    ])
    def test_values(self, epoch, want):
        assert math.isclose(lr_at_epoch(TrainRecipe(), epoch), want, rel_tol=1e-12)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(TrainRecipe(), -1)

    def test_warmup_ramp_when_enabled(self):
        r = TrainRecipe(warmup_epochs=5)
        assert lr_at_epoch(r, 0) == pytest.approx(1e-4)
        assert lr_at_epoch(r, 4) == pytest.approx(5e-4)
        assert lr_at_epoch(r, 5) == pytest.approx(5e-4)

    def test_warmup_off_by_default(self):
        assert TrainRecipe().warmup_epochs == 0
        assert lr_at_epoch(TrainRecipe(), 0) == 5e-4


def two_class_subset(data_dir, size=200):
    ds = load_cifar10(data_dir, "train")
    mask = ds.labels < 2
    return Dataset(images=ds.images[mask][:size], labels=ds.labels[mask][:size], split="train")


class TestTrainLoop:
    def test_short_run_decreases_loss(self, cifar_dir):
        sub = two_class_subset(cifar_dir)
        m = build_model(micro_config(), seed=0)
        recipe = TrainRecipe(batch_size=32, base_lr=1e-3, weight_decay=0.0, epochs=3, seed=0)
        res = train(m, recipe, sub)
        assert res.losses[-1] < res.losses[0]
        assert res.steps == 3 * math.ceil(len(sub) / 32)

    def test_determinism_bit_for_bit(self, cifar_dir):
        sub = two_class_subset(cifar_dir, size=64)
        recipe = TrainRecipe(batch_size=32, base_lr=1e-3, weight_decay=0.01, epochs=2, seed=4)
        runs = []
        for _ in range(2):
            m = build_model(micro_config(), seed=4)
            runs.append(train(m, recipe, sub))
        assert runs[0].log_lines == runs[1].log_lines
        assert runs[0].losses == runs[1].losses

    def test_determinism_across_processes(self, cifar_dir):
        # same (seed, config, recipe, dataset) in two fresh interpreters
        import subprocess
        import sys
        snippet = f"""
import sys
sys.path.insert(0, {repr(os.path.dirname(__file__))})
import numpy as np
from apvt.data_io import Dataset, load_cifar10
from apvt.model import build_model
from apvt.training import TrainRecipe, train
from conftest import micro_config
ds = load_cifar10({repr(cifar_dir)}, "train")
mask = ds.labels < 2
sub = Dataset(images=ds.images[mask][:64], labels=ds.labels[mask][:64], split="train")
m = build_model(micro_config(), seed=4)
res = train(m, TrainRecipe(batch_size=32, base_lr=1e-3, epochs=2, seed=4), sub)
print("\\n".join(res.log_lines))
"""
        outs = []
        for _ in range(2):
            r = subprocess.run([sys.executable, "-c", snippet], capture_output=True,
                               text=True, env=dict(os.environ))
            assert r.returncode == 0, r.stderr
            outs.append(r.stdout)
        assert outs[0] == outs[1]

    def test_log_format_and_lr_column(self, cifar_dir, tmp_path):
        sub = two_class_subset(cifar_dir, size=64)
        m = build_model(micro_config(), seed=0)
        recipe = TrainRecipe(batch_size=32, base_lr=1e-3, weight_decay=0.0, epochs=2, seed=0)
        log = str(tmp_path / "train.log")
        res = train(m, recipe, sub, log_path=log)
        lines = open(log).read().splitlines()
        assert lines == res.log_lines
        for epoch, line in enumerate(lines):
            parts = line.split()
            assert parts[0] == "epoch" and int(parts[1]) == epoch
            assert parts[2] == "lr"
            assert float(parts[3]) == lr_at_epoch(recipe, epoch)
            assert parts[4] == "loss" and len(parts[5].split(".")[1]) == 6
            assert parts[6] == "acc" and len(parts[7].split(".")[1]) == 4

    def test_final_checkpoint_written(self, cifar_dir, tmp_path):
        from apvt.data_io import load_checkpoint_into
        sub = two_class_subset(cifar_dir, size=64)
        m = build_model(micro_config(), seed=0)
        recipe = TrainRecipe(batch_size=32, epochs=1, seed=0)
        ckpt = str(tmp_path / "final.apvt")
        train(m, recipe, sub, ckpt_path=ckpt)
        m2 = build_model(micro_config(), seed=9)
        load_checkpoint_into(m2, ckpt)
        for (_, p1), (_, p2) in zip(m.named_parameters(), m2.named_parameters()):
            np.testing.assert_array_equal(p1.data.astype(np.float32), p2.data)

    def test_empty_dataset_rejected(self):
        m = build_model(micro_config(), seed=0)
        empty = Dataset(images=np.zeros((0, 3, 32, 32), np.float32),
                        labels=np.zeros(0, np.int64), split="train")
        with pytest.raises(ValueError):
            train(m, TrainRecipe(epochs=1), empty)

    def test_full_width_variant_trains_one_epoch(self, cifar_dir):
        # real stage widths (not the micro config): one epoch on a small slice
        from apvt.model import variant_config
        ds = load_cifar10(cifar_dir, "train", limit=64)
        m = build_model(variant_config("APVT-8-2x-a"), seed=0)
        recipe = TrainRecipe(batch_size=32, epochs=1, seed=0)
        res = train(m, recipe, ds)
        assert res.steps == 2
        assert np.isfinite(res.losses[0])

    def test_optional_flags_run_and_stay_deterministic(self, cifar_dir):
        # hflip / label smoothing / grad clip are off by default but usable
        sub = two_class_subset(cifar_dir, size=64)
        recipe = TrainRecipe(batch_size=32, base_lr=1e-3, epochs=2, seed=1,
                             hflip=True, label_smoothing=0.1, grad_clip=1.0)
        runs = []
        for _ in range(2):
            m = build_model(micro_config(), seed=1)
            runs.append(train(m, recipe, sub))
        assert runs[0].log_lines == runs[1].log_lines
        assert runs[0].losses[-1] < runs[0].losses[0] * 2  # still trains sanely


class TestEvaluate:
    def test_memorized_set_hits_100(self, cifar_dir):
        sub = two_class_subset(cifar_dir, size=50)
        m = build_model(micro_config(), seed=0)
        recipe = TrainRecipe(batch_size=16, base_lr=2e-3, weight_decay=0.0, epochs=15, seed=0)
        train(m, recipe, sub)
        acc, loss = evaluate(m, sub)
        assert acc == 1.0

    def test_random_init_is_chance_level(self, cifar_dir):
        ds = load_cifar10(cifar_dir, "train", limit=1000)
        m = build_model(micro_config(num_classes=10), seed=0)
        acc, _ = evaluate(m, ds)
        assert abs(acc - 0.10) < 0.05  # balanced 10-class data

    def test_error_plus_accuracy_is_100(self, cifar_dir):
        ds = load_cifar10(cifar_dir, "test", limit=100)
        m = build_model(micro_config(num_classes=10), seed=0)
        acc, _ = evaluate(m, ds)
        assert 100.0 * acc + 100.0 * (1 - acc) == 100.0

    def test_argmax_tie_breaks_to_lowest_index(self):
        logits = np.zeros((1, 4), dtype=np.float32)
        assert logits.argmax(axis=1)[0] == 0

    def test_empty_dataset(self):
        m = build_model(micro_config(), seed=0)
        empty = Dataset(images=np.zeros((0, 3, 32, 32), np.float32),
                        labels=np.zeros(0, np.int64), split="test")
        with pytest.raises(ValueError):
            evaluate(m, empty)


class TestBenchmark:
    def test_single_iter_single_sample(self):
        m = build_model(micro_config(), seed=0)
        res = benchmark_inference(m, batch=2, warmup=0, iters=1)
        assert len(res.samples_ms) == 1

    def test_variance_reported(self):
        m = build_model(micro_config(), seed=0)
        res = benchmark_inference(m, batch=2, warmup=1, iters=4)
        assert res.std_ms >= 0.0
        assert res.mean_ms > 0.0 and res.median_ms > 0.0

    def test_iters_validated(self):
        m = build_model(micro_config(), seed=0)
        with pytest.raises(ValueError):
            benchmark_inference(m, iters=0)


class TestRecipe:
    def test_defaults_match_published_protocol(self):
        r = TrainRecipe()
        assert r.batch_size == 128
        assert r.base_lr == 5e-4
        assert r.lr_decay_factor == 0.1
        assert r.lr_decay_every == 30
        assert r.epochs == 60
        assert (r.beta1, r.beta2) == (0.9, 0.999)
        assert r.eps == 1e-8

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainRecipe(batch_size=0)
        with pytest.raises(ValueError):
            TrainRecipe(weight_decay=-0.1)
