import os
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]


def data_root() -> Path:
    return Path(os.environ.get("SHIFTBNN_DATA", ROOT / "data"))


def has_dataset(name: str) -> bool:
    sub = {"mnist": "mnist/train-images-idx3-ubyte", "cifar10": "cifar-10-batches-bin/test_batch.bin"}[name]
    return (data_root() / sub).exists()


@pytest.fixture(scope="session")
def mnist():
    if not has_dataset("mnist"):
        pytest.skip(f"MNIST not found under {data_root()}")
    from shiftbnn import data
    return data.load_mnist(data_root() / "mnist")


@pytest.fixture(scope="session")
def synthetic_mnist(tmp_path_factory):
    """A small learnable IDX dataset: the label is encoded as a bright horizontal band."""
    from shiftbnn.data import MNIST_FILES, encode_idx
    import numpy as np

    root = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    for split, n in (("train", 600), ("test", 200)):
        labels = rng.integers(0, 10, n)
        imgs = rng.integers(0, 60, size=(n, 28, 28))
        for i, y in enumerate(labels):
            imgs[i, 2 + 2 * y:4 + 2 * y, 4:24] = 255
        img_name, lbl_name = MNIST_FILES[split]
        (root / img_name).write_bytes(encode_idx(imgs))
        (root / lbl_name).write_bytes(encode_idx(labels))
    return root


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
