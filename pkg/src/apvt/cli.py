"""Command-line workflows: params / gradcheck / train / eval / bench / selftest."""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from . import tensor as T
from .attention import TokenMap, sra_forward
from .blocks import ConfigError, encoder_path_forward, group_encoder_forward
from .data_io import load_checkpoint_into, load_cifar10, save_checkpoint
from .gradcheck import grad_check
from .model import (REFERENCE_PARAMS, ModelConfig, build_model, count_parameters,
                    forward, variant_config)
from .training import TrainRecipe, benchmark_inference, evaluate, lr_at_epoch, train


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", help="named model variant, e.g. apvt-8-2x-a")
    p.add_argument("--depths", help="per-stage block counts, e.g. 2,2,2,2")
    p.add_argument("--depth", type=int, help="uniform per-stage block count (shorthand for --depths N,N,N,N)")
    p.add_argument("--paths", type=int, help="encoder paths per block")
    p.add_argument("--head-dim", type=int, help="per-head channel width")
    p.add_argument("--classes", type=int, help="number of output classes (default 10)")
    p.add_argument("--input-size", help="input extent HxW (default 32x32)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f64", action="store_true", help="build in float64 verification mode")
    p.add_argument("--debug", action="store_true", help="enable NaN/Inf checks after every primitive")


def _parse_depths(text: str) -> tuple[int, int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"--depths needs four comma-separated values, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _parse_input_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"--input-size must look like 224x224, got {text!r}")
    return int(parts[0]), int(parts[1])


def _resolve_config(args) -> ModelConfig:
    overrides = {}
    if args.depths:
        overrides["depths"] = _parse_depths(args.depths)
    elif args.depth:
        overrides["depths"] = (args.depth,) * 4
    if args.paths:
        overrides["paths"] = args.paths
    if args.head_dim:
        overrides["head_dim"] = args.head_dim
    if args.classes:
        overrides["num_classes"] = args.classes
    if args.input_size:
        overrides["input_size"] = _parse_input_size(args.input_size)
    if args.variant:
        return variant_config(args.variant, **overrides)
    required = ("depths", "paths", "head_dim")
    missing = [k for k in required if k not in overrides]
    if missing:
        raise ConfigError(
            "without --variant, explicit dimensions are required; missing: "
            + ", ".join(missing))
    overrides.setdefault("num_classes", 10)
    overrides.setdefault("input_size", (32, 32))
    return ModelConfig(name="custom", **overrides)


def _dtype(args):
    return np.float64 if args.f64 else np.float32


def cmd_params(args) -> int:
    cfg = _resolve_config(args)
    model = build_model(cfg, seed=args.seed, dtype=_dtype(args))
    audit = count_parameters(model)
    print(f"model {cfg.name}  depths {cfg.depths}  paths {cfg.paths}  head_dim {cfg.head_dim}")
    print(f"classes {cfg.num_classes}  input {cfg.input_size[0]}x{cfg.input_size[1]}")
    print(audit.format())
    ref = REFERENCE_PARAMS.get(cfg.name)
    if ref:
        dev = 100.0 * (audit.total - ref) / ref
        print(f"reference total {ref / 1e6:.2f}M  deviation {dev:+.2f}%")
    return 0


def _micro_token_map(rng, n_tokens: int, dim: int, h: int, w: int, dtype):
    data = rng.standard_normal((n_tokens, dim)).astype(dtype)
    return TokenMap(T.tensor(data, dtype=dtype), h, w)


def _sq_mean(out_fn):
    """Scalar loss builder: mean of squared block output."""
    def loss():
        out = out_fn()
        return T.mean(T.mul(out, out))
    return loss


def cmd_gradcheck(args) -> int:
    from .blocks import ConvFFNParams, EncoderPathParams, GroupEncoderParams, conv_ffn_forward
    from .model import PatchEmbedParams, patch_embed_forward

    dtype = np.float64
    rng = np.random.default_rng(args.seed)
    paths = args.paths or 2
    head_dim = args.head_dim or 8
    heads, reduction, expansion = 2, 2, 2
    dim = heads * head_dim
    tm = _micro_token_map(rng, 16, dim, 4, 4, dtype)

    ffn = ConvFFNParams.create(rng, dim, expansion, dtype=dtype)
    path = EncoderPathParams.create(rng, heads, head_dim, reduction, expansion, dtype=dtype)
    grp = GroupEncoderParams.create(rng, paths, heads, head_dim, reduction, expansion, dtype=dtype)
    patch = PatchEmbedParams.create(rng, 3, 4, dim, dtype=dtype)
    img = _micro_token_map(rng, 64, 3, 8, 8, dtype)

    depth = args.depth or 1
    cfg = ModelConfig("micro", (depth,) * 4, paths=paths, head_dim=head_dim,
                      num_classes=2, input_size=(32, 32))
    micro = build_model(cfg, seed=args.seed, dtype=dtype)
    images = rng.standard_normal((2, 3, 32, 32))
    labels = np.array([0, 1])

    checks = [
        ("conv_ffn", _sq_mean(lambda: conv_ffn_forward(tm, ffn).tokens),
         [t for _, t in ffn.named_tensors("ffn")], None, 1e-4),
        ("encoder_path", _sq_mean(lambda: encoder_path_forward(tm, path).tokens),
         [t for _, t in path.named_tensors("path")], 24, 1e-4),
        ("group_encoder", _sq_mean(lambda: group_encoder_forward(tm, grp).tokens),
         [t for _, t in grp.named_tensors("grp")], 12, 1e-4),
        ("sra", _sq_mean(lambda: sra_forward(tm, path.attn).tokens),
         [t for _, t in path.attn.named_tensors("attn")], 24, 1e-4),
        ("patch_embed", _sq_mean(lambda: patch_embed_forward(img, patch).tokens),
         [t for _, t in patch.named_tensors("patch")], None, 1e-4),
        ("micro_model", lambda: T.cross_entropy(forward(micro, images.copy()), labels),
         micro.parameters(), 4, 1e-3),
    ]

    ok = True
    for name, loss_fn, params, samples, tol in checks:
        err = grad_check(loss_fn, params, max_samples_per_param=samples, seed=args.seed)
        status = "PASS" if err < tol else "FAIL"
        ok = ok and err < tol
        print(f"{name:14} max_rel_err {err:.3e}  (tol {tol:.0e})  {status}")
    return 0 if ok else 1


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    recipe = TrainRecipe(
        batch_size=args.batch, base_lr=args.lr, weight_decay=args.wd,
        epochs=args.epochs, seed=args.seed,
    )
    data = load_cifar10(args.data_dir, "train", limit=args.limit)
    model = build_model(cfg, seed=args.seed, dtype=_dtype(args))
    print(f"training {cfg.name} on {len(data)} images for {args.epochs} epochs")
    result = train(model, recipe, data, log_path=args.log, ckpt_path=args.ckpt, epochs=args.epochs)
    for line in result.log_lines:
        print(line)
    if args.ckpt:
        print(f"checkpoint written to {args.ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model = build_model(cfg, seed=args.seed, dtype=_dtype(args))
    if args.ckpt:
        load_checkpoint_into(model, args.ckpt)
    data = load_cifar10(args.data_dir, args.split, limit=args.limit)
    acc, loss = evaluate(model, data)
    print(f"split {args.split}  images {len(data)}  top1 {100 * acc:.2f}%  "
          f"err {100 * (1 - acc):.2f}%  loss {loss:.6f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    model = build_model(cfg, seed=args.seed, dtype=_dtype(args))
    res = benchmark_inference(model, batch=args.batch, warmup=args.warmup, iters=args.iters)
    print(f"model {cfg.name}  batch {args.batch}  iters {args.iters} (+{args.warmup} warmup)")
    print(f"per-image latency: mean {res.mean_ms:.3f} ms  median {res.median_ms:.3f} ms  "
          f"std {res.std_ms:.3f} ms")
    return 0


def cmd_selftest(args) -> int:
    """Structural invariants, fail-fast with the violated check's name."""
    rng = np.random.default_rng(args.seed)

    def check(name, fn):
        try:
            fn()
        except Exception as exc:
            print(f"selftest FAILED at {name}: {exc}")
            return False
        print(f"selftest {name}: ok")
        return True

    def merge_additivity():
        from .blocks import GroupEncoderParams
        grp = GroupEncoderParams.create(rng, 2, 2, 8, 2, 2, dtype=np.float64)
        tm = _micro_token_map(rng, 16, 16, 4, 4, np.float64)
        whole = group_encoder_forward(tm, grp).tokens.data - tm.tokens.data
        parts = sum(encoder_path_forward(tm, p).tokens.data for p in grp.paths)
        if not np.allclose(whole, parts, atol=1e-12):
            raise AssertionError(f"max deviation {np.abs(whole - parts).max():.3e}")

    def msa_sra_equivalence():
        from .attention import AttentionParams
        from .tensor import softmax as sm
        p = AttentionParams.create(rng, 2, 8, 1, dtype=np.float64)
        tm = _micro_token_map(rng, 16, 16, 4, 4, np.float64)
        got = sra_forward(tm, p).tokens.data
        x = tm.tokens.data
        heads = []
        hd = p.head_dim
        for j in range(p.num_heads):
            q = x @ p.wq.data[:, j * hd:(j + 1) * hd] + p.bq.data[j * hd:(j + 1) * hd]
            k = x @ p.wk.data[:, j * hd:(j + 1) * hd] + p.bk.data[j * hd:(j + 1) * hd]
            v = x @ p.wv.data[:, j * hd:(j + 1) * hd] + p.bv.data[j * hd:(j + 1) * hd]
            s = q @ k.T / np.sqrt(hd)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            heads.append((e / e.sum(axis=1, keepdims=True)) @ v)
        want = np.concatenate(heads, axis=1) @ p.wo.data + p.bo.data
        if not np.allclose(got, want, atol=1e-6):
            raise AssertionError(f"max deviation {np.abs(got - want).max():.3e}")

    def stride_contract():
        cfg = ModelConfig("micro", (1, 1, 1, 1), paths=1, head_dim=8, input_size=(32, 32))
        m = build_model(cfg, seed=0)
        feats = forward(m, np.zeros((1, 3, 32, 32), dtype=np.float32), mode="features")
        extents = [(f.h, f.w) for f in feats]
        if extents != [(8, 8), (4, 4), (2, 2), (1, 1)]:
            raise AssertionError(f"got extents {extents}")

    def checkpoint_roundtrip():
        cfg = ModelConfig("micro", (1, 1, 1, 1), paths=2, head_dim=8)
        m = build_model(cfg, seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "ckpt.apvt")
            save_checkpoint(m.named_parameters(), path)
            m2 = build_model(cfg, seed=2)
            load_checkpoint_into(m2, path)
            for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
                if n1 != n2 or not np.array_equal(p1.data, p2.data):
                    raise AssertionError(f"mismatch at {n1}")

    def lr_schedule():
        recipe = TrainRecipe()
        expected = [(0, 5e-4), (29, 5e-4), (30, 5e-5), (59, 5e-5), (60, 5e-6)]
        for epoch, want in expected:
            got = lr_at_epoch(recipe, epoch)
            if not np.isclose(got, want, rtol=1e-12):
                raise AssertionError(f"epoch {epoch}: got {got}, want {want}")

    for name, fn in (("merge_additivity", merge_additivity),
                     ("msa_sra_equivalence", msa_sra_equivalence),
                     ("stride_contract", stride_contract),
                     ("checkpoint_roundtrip", checkpoint_roundtrip),
                     ("lr_schedule", lr_schedule)):
        if not check(name, fn):
            return 1
    print("selftest: all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apvt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="print the parameter audit for a config")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train", help="train on CIFAR-10 binary data")
    _add_config_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--epochs", type=int, default=TrainRecipe.epochs)
    p.add_argument("--batch", type=int, default=TrainRecipe.batch_size)
    p.add_argument("--lr", type=float, default=TrainRecipe.base_lr)
    p.add_argument("--wd", type=float, default=TrainRecipe.weight_decay)
    p.add_argument("--limit", type=int, help="keep only the first N records")
    p.add_argument("--ckpt", help="write final checkpoint here")
    p.add_argument("--log", help="append per-epoch log lines here")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--ckpt", help="checkpoint to restore before evaluating")
    p.add_argument("--limit", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="inference latency microbenchmark")
    _add_config_flags(p)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=10)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("selftest", help="run the structural invariant checks")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "debug", False):
        T.set_debug_checks(True)
    try:
        return args.fn(args)
    except (ConfigError, T.DimensionError, ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
