"""Unstructured magnitude pruning with fixed binary masks.

A mask is computed once from the initial weights and then multiplies the
weight in every forward, the weight gradient, and the stored value after
every optimizer update, so pruned coordinates stay exactly zero.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class PruningMask:
    mask: np.ndarray
    ratio: float
    criterion: str = "l1"

    def __post_init__(self):
        self.mask.setflags(write=False)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def num_pruned(self):
        return int(self.mask.size - np.count_nonzero(self.mask))


def num_to_prune(n, ratio):
    # floor(ratio * n); the epsilon guards ratios like 0.35 whose binary value
    # lands just below the exact product
    return min(n, int(np.floor(ratio * n + 1e-9)))


def build_mask(weights, ratio):
    """Zero the ``floor(ratio * n)`` smallest-magnitude entries.

    Ties in magnitude are broken toward the lowest flat index.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"pruning ratio must lie in [0, 1], got {ratio}")
    w = np.asarray(getattr(weights, "data", weights))
    flat = np.abs(w).ravel()
    k = num_to_prune(flat.size, ratio)
    mask = np.ones(flat.size, dtype=w.dtype if w.dtype.kind == "f" else np.float64)
    if k:
        order = np.argsort(flat, kind="stable")
        mask[order[:k]] = 0
    return PruningMask(mask.reshape(w.shape), float(ratio))


def apply_mask(layer, mask):
    """Attach ``mask`` to a conv layer and zero the pruned stored weights."""
    if mask.shape != layer.weight.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match weight {layer.weight.shape}")
    layer.mask = mask
    layer.weight.data *= mask.mask
