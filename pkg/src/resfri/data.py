"""MNIST-style IDX and CIFAR binary readers, plus seeded mini-batching.

Augmentation randomness is derived from ``(seed, epoch, batch_index)`` so a
batch is fully determined by its coordinates, independent of how far ahead
any producer runs.
"""

import gzip
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_IMAGE_BYTES = 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # uint16 [N]
    num_classes: int
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DataError(
                f"label {int(self.labels.max())} out of range for {self.num_classes} classes"
            )

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        return replace(self, images=self.images[indices], labels=self.labels[indices])


@dataclass(frozen=True)
class AugmentPolicy:
    pad: int = 4
    flip_prob: float = 0.5
    enabled: bool = True

    @classmethod
    def off(cls):
        return cls(pad=0, flip_prob=0.0, enabled=False)


DEFAULT_POLICIES = {
    "mnist": AugmentPolicy(pad=4, flip_prob=0.0),
    "fashion": AugmentPolicy(pad=4, flip_prob=0.5),
    "cifar10": AugmentPolicy(pad=4, flip_prob=0.5),
    "cifar100": AugmentPolicy(pad=4, flip_prob=0.5),
}


def _read_bytes(path):
    path = os.fspath(path)
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path += ".gz"
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(buf, expected_magic):
    """Decode an IDX byte string into a uint8 array of the header's dims."""
    if len(buf) < 4:
        raise FormatError("IDX header truncated", offset=len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != expected_magic:
        raise FormatError(
            f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("IDX dimension header truncated", offset=len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise FormatError(
            f"IDX payload truncated: need {count} bytes, have {len(buf) - header}",
            offset=len(buf),
        )
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(array, magic):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + array.tobytes()


def load_idx(images_path, labels_path, num_classes=10):
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"expected 3-D IDX image tensor, got {images.ndim} dims", offset=3)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None].copy(), labels.astype(np.uint16), num_classes)


def parse_cifar(buf, variant):
    label_bytes = {"c10": 1, "c100": 2}.get(variant)
    if label_bytes is None:
        raise ConfigError(f"unknown CIFAR variant {variant!r}; use 'c10' or 'c100'")
    record = label_bytes + CIFAR_IMAGE_BYTES
    if len(buf) % record:
        whole = len(buf) // record * record
        raise FormatError(
            f"CIFAR file length {len(buf)} is not a multiple of the {record}-byte record",
            offset=whole,
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    # c100 records are (coarse, fine, pixels); the fine label is the last label byte
    labels = raw[:, label_bytes - 1].astype(np.uint16)
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def load_cifar(paths, variant):
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    parts = [parse_cifar(_read_bytes(p), variant) for p in paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, 10 if variant == "c10" else 100)


def pad_to(ds, size):
    """Zero-pad images symmetrically to ``size`` x ``size``."""
    _, _, h, w = ds.images.shape
    if h > size or w > size:
        raise ConfigError(f"cannot pad {h}x{w} images to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros(ds.images.shape[:2] + (size, size), dtype=np.uint8)
    out[:, :, top:top + h, left:left + w] = ds.images
    return replace(ds, images=out)


def channel_stats(ds):
    """Per-channel mean/std of pixels scaled to [0, 1]."""
    x = ds.images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def with_stats(ds, stats=None):
    mean, std = channel_stats(ds) if stats is None else stats
    return replace(ds, mean=np.asarray(mean), std=np.asarray(std))


def stratified_split(ds, fraction, seed):
    """Hold out ``round(fraction * count)`` samples of every class."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in [0, 1), got {fraction}")
    rng = np.random.default_rng([seed, 0x5EED])
    held, kept = [], []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        held.append(idx[:k])
        kept.append(idx[k:])
    train_idx = np.sort(np.concatenate(kept))
    val_idx = np.sort(np.concatenate(held))
    return ds.subset(train_idx), ds.subset(val_idx)


def random_crop_flip(images, policy, rng):
    """Pad-and-crop plus optional horizontal flip on a uint8 batch."""
    n, _, h, w = images.shape
    p = policy.pad
    out = images.copy()
    if p:
        padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if policy.flip_prob > 0:
        flips = rng.random(n) < policy.flip_prob
        out[flips] = out[flips, :, :, ::-1]
    return out


def normalize(images, mean, std, dtype=np.float32):
    x = images.astype(np.float64) / 255.0
    x = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return x.astype(dtype)


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds, batch_size, policy=None, seed=0, epoch=0, shuffle=True, dtype=np.float32):
    """Yield ``(Tensor, labels)`` pairs covering ``ds`` once.

    The last batch may be short.  ``ds.mean``/``ds.std`` must hold the
    training-split statistics.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if ds.mean is None:
        raise ConfigError("dataset has no normalization statistics; call with_stats first")
    policy = AugmentPolicy.off() if policy is None else policy
    order = epoch_order(len(ds), seed, epoch) if shuffle else np.arange(len(ds))
    for b, start in enumerate(range(0, len(ds), batch_size)):
        idx = order[start:start + batch_size]
        images = ds.images[idx]
        if policy.enabled:
            rng = np.random.default_rng([seed, epoch, b])
            images = random_crop_flip(images, policy, rng)
        x = normalize(images, ds.mean, ds.std, dtype)
        yield Tensor(x), ds.labels[idx].astype(np.int64)


DATASET_FILES = {
    "mnist": ("mnist", ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"],
              ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]),
    "fashion": ("fashion", ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"],
                ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]),
    "cifar10": ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)],
                ["test_batch.bin"]),
    "cifar100": ("cifar-100-binary", ["train.bin"], ["test.bin"]),
}


def dataset_paths(root, name):
    if name not in DATASET_FILES:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(DATASET_FILES)}")
    sub, train, test = DATASET_FILES[name]
    base = os.path.join(os.fspath(root), sub)
    return [os.path.join(base, f) for f in train], [os.path.join(base, f) for f in test]


def _check_present(paths):
    for p in paths:
        if not (os.path.exists(p) or os.path.exists(p + ".gz")):
            raise FileNotFoundError(p)


def load_dataset(root, name):
    """Load ``(train, test)`` for a named dataset, resized to 32x32.

    Test images are normalized with the training split's statistics.
    """
    train_paths, test_paths = dataset_paths(root, name)
    _check_present(train_paths + test_paths)
    if name in ("mnist", "fashion"):
        train = pad_to(load_idx(*train_paths), 32)
        test = pad_to(load_idx(*test_paths), 32)
    else:
        variant = "c10" if name == "cifar10" else "c100"
        train = load_cifar(train_paths, variant)
        test = load_cifar(test_paths, variant)
    train = with_stats(train)
    test = with_stats(test, (train.mean, train.std))
    return train, test
