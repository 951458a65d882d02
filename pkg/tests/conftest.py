import os

import numpy as np
import pytest

from apvt.data_io import RECORD_BYTES


def synth_record(label: int, rng: np.random.Generator) -> bytes:
    """One CIFAR-layout record with a class-dependent smooth pattern + noise."""
    yy, xx = np.mgrid[0:32, 0:32] / 31.0
    patterns = [yy, xx, 1 - yy, 1 - xx, yy * xx,
                (1 - yy) * xx, yy * (1 - xx), (1 - yy) * (1 - xx),
                0.5 + 0 * yy, np.abs(yy - xx)]
    base = patterns[label % 10]
    img = np.stack([base * (0.5 + 0.25 * c) for c in range(3)]) * 160
    img = img + rng.normal(0, 20, size=(3, 32, 32))
    pix = np.clip(img, 0, 255).astype(np.uint8)
    rec = bytes([label]) + pix.tobytes()
    assert len(rec) == RECORD_BYTES
    return rec


def write_cifar_dir(path: str, per_file: int = 200, test_records: int = 200, seed: int = 7) -> None:
    """Standard binary layout: five train batch files plus one test batch."""
    rng = np.random.default_rng(seed)
    for i in range(1, 6):
        with open(os.path.join(path, f"data_batch_{i}.bin"), "wb") as fh:
            for r in range(per_file):
                fh.write(synth_record(r % 10, rng))
    with open(os.path.join(path, "test_batch.bin"), "wb") as fh:
        for r in range(test_records):
            fh.write(synth_record(r % 10, rng))


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cifar")
    write_cifar_dir(str(d))
    return str(d)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def micro_config(**overrides):
    from apvt.model import ModelConfig
    kw = dict(name="micro", depths=(1, 1, 1, 1), paths=2, head_dim=8,
              num_classes=2, input_size=(32, 32))
    kw.update(overrides)
    return ModelConfig(**kw)
