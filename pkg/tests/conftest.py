import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from resfri.block import FusionMode, GroupPlan, ResFRIBlockConfig  # noqa: E402
from resfri.data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, encode_idx  # noqa: E402
from resfri.network import NetworkConfig  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(channels=1, fusion="addition", split=True, classes=10):
    """One small block on 32x32 input; fast enough for end-to-end tests."""
    block = ResFRIBlockConfig(8, GroupPlan.inception(16), FusionMode(fusion), split=split)
    return NetworkConfig(input_shape=(channels, 32, 32), num_classes=classes, stem=[8],
                         blocks=[block], downsample=[True])


def synthetic_digits(n, seed, size=28):
    """Blob images whose position encodes the class, so a tiny net can learn them."""
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    r.shuffle(labels)
    images = r.integers(0, 40, size=(n, size, size)).astype(np.uint8)
    for i, y in enumerate(labels):
        cy, cx = 4 + 5 * (y // 5) * 2, 3 + 5 * (y % 5)
        images[i, cy:cy + 6, cx:cx + 4] = 250
    return images, labels.astype(np.uint8)


def write_mnist_root(root, n_train=120, n_test=40, seed=0):
    d = os.path.join(root, "mnist")
    os.makedirs(d, exist_ok=True)
    for prefix, n, s in (("train", n_train, seed), ("t10k", n_test, seed + 1)):
        images, labels = synthetic_digits(n, s)
        with open(os.path.join(d, f"{prefix}-images-idx3-ubyte"), "wb") as f:
            f.write(encode_idx(images, IDX_IMAGES_MAGIC))
        with open(os.path.join(d, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
            f.write(encode_idx(labels, IDX_LABELS_MAGIC))
    return root


@pytest.fixture
def mnist_root(tmp_path):
    return write_mnist_root(str(tmp_path / "data"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
