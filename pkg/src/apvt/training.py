"""Training loop, decoupled-weight-decay optimizer, schedule and metrics.

Defaults reproduce the published recipe: batch size 128, AdamW at an initial
learning rate of 5e-4 decayed by 0.1 every 30 epochs, 60 epochs. Runs are
fully deterministic given (seed, config, recipe, dataset); the per-epoch
shuffle is regenerated from (seed, epoch) so training is resumable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data_io import Dataset, save_checkpoint
from .model import Model, forward
from .tensor import backward, no_grad


@dataclass(frozen=True)
class TrainRecipe:
    batch_size: int = 128
    base_lr: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 30
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    seed: int = 0
    grad_clip: float | None = None     # off by default
    warmup_epochs: int = 0             # off by default
    hflip: bool = False                # no augmentation by default
    label_smoothing: float = 0.0       # off by default

    def __post_init__(self):
        for name in ("batch_size", "base_lr", "lr_decay_factor", "lr_decay_every",
                     "epochs", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"recipe field {name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def lr_at_epoch(recipe: TrainRecipe, epoch: int) -> float:
    """base_lr * decay_factor ** floor(epoch / decay_every), with an optional
    linear ramp over the first ``warmup_epochs`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch < recipe.warmup_epochs:
        return recipe.base_lr * (epoch + 1) / recipe.warmup_epochs
    return recipe.base_lr * recipe.lr_decay_factor ** (epoch // recipe.lr_decay_every)


def decays_weight(name: str) -> bool:
    """Decay applies to projection/conv weights only: norm affines, biases and
    position grids are excluded."""
    return name.endswith(".w")


class AdamW:
    """Decoupled weight decay: the shrink step never touches the moments."""

    def __init__(self, named_params, recipe: TrainRecipe):
        self.named_params = list(named_params)
        self.recipe = recipe
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        r = self.recipe
        self.t += 1
        bc1 = 1.0 - r.beta1 ** self.t
        bc2 = 1.0 - r.beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if r.grad_clip is not None:
                g = np.clip(g, -r.grad_clip, r.grad_clip)
            m = self.m[name]
            v = self.v[name]
            m *= r.beta1
            m += (1.0 - r.beta1) * g
            v *= r.beta2
            v += (1.0 - r.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + r.eps)
            p.data = p.data - lr * update
            if r.weight_decay and decays_weight(name):
                p.data = p.data - lr * r.weight_decay * p.data


@dataclass
class TrainResult:
    log_lines: list[str]
    losses: list[float]
    accuracies: list[float]
    steps: int


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng((seed, epoch))


def train(model: Model, recipe: TrainRecipe, data: Dataset,
          log_path: str | None = None, ckpt_path: str | None = None,
          epochs: int | None = None) -> TrainResult:
    """Mini-batch cross-entropy training with one log line per epoch:
    ``epoch <i> lr <lr> loss <x.xxxxxx> acc <x.xxxx>``."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    epochs = recipe.epochs if epochs is None else epochs
    opt = AdamW(model.named_parameters(), recipe)
    log_lines: list[str] = []
    losses: list[float] = []
    accs: list[float] = []
    log_fh = open(log_path, "a") if log_path else None
    step = 0
    try:
        for epoch in range(epochs):
            lr = lr_at_epoch(recipe, epoch)
            rng = _epoch_rng(recipe.seed, epoch)
            order = rng.permutation(n)
            loss_sum = 0.0
            correct = 0
            for start in range(0, n, recipe.batch_size):
                idx = order[start:start + recipe.batch_size]
                images = data.images[idx].astype(model.dtype, copy=True)
                labels = data.labels[idx]
                if recipe.hflip:
                    flip = rng.random(len(idx)) < 0.5
                    images[flip] = images[flip][..., ::-1]
                logits = forward(model, images)
                loss = T.cross_entropy(logits, labels, smoothing=recipe.label_smoothing)
                if not np.isfinite(loss.data):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                opt.zero_grad()
                backward(loss)
                opt.step(lr)
                loss_sum += float(loss.data) * len(idx)
                correct += int((logits.data.argmax(axis=1) == labels).sum())
                step += 1
            mean_loss = loss_sum / n
            acc = correct / n
            losses.append(mean_loss)
            accs.append(acc)
            line = f"epoch {epoch} lr {lr:g} loss {mean_loss:.6f} acc {acc:.4f}"
            log_lines.append(line)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_path:
        save_checkpoint(model.named_parameters(), ckpt_path)
    return TrainResult(log_lines=log_lines, losses=losses, accuracies=accs, steps=step)


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy (argmax, first index wins ties) and mean loss."""
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    correct = 0
    loss_sum = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            images = data.images[start:start + batch_size].astype(model.dtype)
            labels = data.labels[start:start + batch_size]
            logits = forward(model, images)
            loss_sum += float(T.cross_entropy(logits, labels).data) * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / n, loss_sum / n


@dataclass
class BenchResult:
    mean_ms: float
    median_ms: float
    std_ms: float
    samples_ms: list[float] = field(default_factory=list)


def benchmark_inference(model: Model, batch: int = 8, warmup: int = 2, iters: int = 10,
                        seed: int = 0) -> BenchResult:
    """Wall-clock per-image forward latency after warmup discards."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    h, w = model.cfg.input_size
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((batch, model.cfg.in_channels, h, w)).astype(model.dtype)
    samples: list[float] = []
    with no_grad():
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            forward(model, images)
            t1 = time.perf_counter()
            if i >= warmup:
                samples.append((t1 - t0) / batch * 1e3)
    arr = np.array(samples)
    return BenchResult(mean_ms=float(arr.mean()), median_ms=float(np.median(arr)),
                       std_ms=float(arr.std()), samples_ms=samples)
