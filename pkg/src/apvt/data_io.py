"""CIFAR-10 binary ingestion and bit-exact checkpoint serialization.

The dataset loader parses the standard binary batch layout: each record is
3073 bytes, one label byte followed by 3x1024 channel-planar pixel bytes.
Pixels are scaled to [0, 1] and normalized with per-channel statistics
computed once from the training split (cached in a sidecar text file so test
data never contributes).

Checkpoints store float32 payloads regardless of compute dtype; loading into
a float64 verification model converts on the way in.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
STATS_FILENAME = "cifar10_stats.txt"

CKPT_MAGIC = b"APVT"
CKPT_VERSION = 1


class DataFormatError(ValueError):
    """Dataset files are missing or not in the expected binary layout."""


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointEntryError(CheckpointError):
    """Entry names or shapes do not match the target parameter registry."""


@dataclass
class Dataset:
    images: np.ndarray   # [N, 3, 32, 32] float32, normalized
    labels: np.ndarray   # [N] int64 in [0, 9]
    split: str

    def __len__(self) -> int:
        return len(self.labels)


def _read_records(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise DataFormatError(
            f"{path}: length {len(raw)} is not a positive multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{path}: label byte above 9 found")
    pixels = rec[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return pixels, labels


def _split_files(split: str) -> tuple[str, ...]:
    if split == "train":
        return TRAIN_FILES
    if split == "test":
        return TEST_FILES
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def _raw_split(data_dir: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    pixel_parts, label_parts = [], []
    for fname in _split_files(split):
        path = os.path.join(data_dir, fname)
        if not os.path.exists(path):
            raise DataFormatError(f"missing CIFAR-10 batch file: {path}")
        px, lb = _read_records(path)
        pixel_parts.append(px)
        label_parts.append(lb)
    return np.concatenate(pixel_parts), np.concatenate(label_parts)


def compute_normalization_stats(data_dir: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of the training split on the [0, 1] scale."""
    pixels, _ = _raw_split(data_dir, "train")
    scaled = pixels.astype(np.float64) / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def load_normalization_stats(data_dir: str) -> tuple[np.ndarray, np.ndarray]:
    """Read cached stats from the sidecar, computing and caching on a miss.

    Freshly computed values are rounded through the sidecar's six-decimal
    format so the first run and every later run normalize identically.
    """
    path = os.path.join(data_dir, STATS_FILENAME)
    if not os.path.exists(path):
        mean, std = compute_normalization_stats(data_dir)
        line = " ".join(f"{v:.6f}" for v in np.concatenate([mean, std]))
        try:
            with open(path, "w") as fh:
                fh.write(line + "\n")
        except OSError:
            pass  # read-only data dir: stats are still usable, just not cached
        vals = [float(v) for v in line.split()]
    else:
        with open(path) as fh:
            vals = [float(v) for v in fh.read().split()]
        if len(vals) != 6:
            raise DataFormatError(f"{path}: expected six numbers, got {len(vals)}")
    return np.array(vals[:3], dtype=np.float32), np.array(vals[3:], dtype=np.float32)


def load_cifar10(data_dir: str, split: str, limit: int | None = None) -> Dataset:
    """Parse a CIFAR-10 binary split into a normalized Dataset.

    ``limit`` keeps exactly the first ``limit`` records in file order, which
    makes truncated runs reproducible.
    """
    pixels, labels = _raw_split(data_dir, split)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    mean, std = load_normalization_stats(data_dir)
    images = pixels.astype(np.float32) / np.float32(255.0)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images=images, labels=labels, split=split)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(named_params, path: str) -> None:
    """Write (name, tensor) pairs in order.

    Layout: magic 'APVT', version u32, entry count u32, then per entry
    name-length u32 + UTF-8 name, rank u32, one u32 per extent, and the
    payload as little-endian float32.
    """
    items = [(name, np.asarray(t.data if hasattr(t, "data") else t)) for name, t in named_params]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint into an ordered name -> float32 array mapping."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version} != {CKPT_VERSION}")
    out: dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            numel = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=off).reshape(shape)
            off += 4 * numel
            out[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt entry data: {exc}") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def load_checkpoint_into(model, path: str) -> None:
    """Restore parameters, validating names and shapes against the registry.

    No parameter is modified unless the whole file validates.
    """
    entries = load_checkpoint(path)
    named = model.named_parameters()
    if [n for n, _ in named] != list(entries):
        raise CheckpointEntryError(
            f"{path}: parameter names do not match the model registry")
    for name, param in named:
        arr = entries[name]
        if arr.shape != param.shape:
            raise CheckpointEntryError(
                f"{path}: shape {arr.shape} for {name!r} does not match model {param.shape}")
    for name, param in named:
        param.data = entries[name].astype(model.dtype, copy=True)
