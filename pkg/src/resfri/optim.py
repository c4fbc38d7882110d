"""SGD with momentum and the halve-on-plateau learning-rate rule."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError


def sgd_step(params, grads, velocities, lr, momentum=0.9, weight_decay=0.0,
             decay=None, masks=None):
    """One in-place update of every array in ``params``.

    g <- grad + wd * w ; v <- momentum * v + g ; w <- w - lr * v.
    ``decay[i]`` switches weight decay per parameter; ``masks[i]`` (or None)
    is multiplied into the updated weight.
    """
    for i, (w, g, v) in enumerate(zip(params, grads, velocities)):
        if g is None:
            raise UsageError(f"parameter {i} has no gradient; run backward first")
        if weight_decay and (decay is None or decay[i]):
            g = g + weight_decay * w
        v *= momentum
        v += g
        w -= lr * v
        if masks is not None and masks[i] is not None:
            w *= masks[i]


class SGD:
    """Momentum SGD over a module's parameters.

    Weight decay applies only to parameters named ``weight`` (conv/linear
    kernels); BN affine terms and biases are exempt.  Pruning masks attached
    to conv layers are re-applied after every update.
    """

    def __init__(self, net, lr=0.01, momentum=0.9, weight_decay=5e-4):
        self.named = list(net.named_parameters())
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = [name.rsplit(".", 1)[-1] == "weight" for name, _ in self.named]
        masks = {id(layer.weight): layer.mask.mask for layer in net.modules()
                 if getattr(layer, "mask", None) is not None}
        self.masks = [masks.get(id(p)) for _, p in self.named]
        self.velocities = [np.zeros_like(p.data) for _, p in self.named]

    def step(self):
        sgd_step([p.data for _, p in self.named], [p.grad for _, p in self.named],
                 self.velocities, self.lr, self.momentum, self.weight_decay,
                 self.decay, self.masks)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def state_arrays(self):
        return {name: v for (name, _), v in zip(self.named, self.velocities)}

    def load_state_arrays(self, arrays):
        for i, (name, p) in enumerate(self.named):
            v = arrays[name]
            if v.shape != p.shape:
                raise UsageError(f"velocity for {name} has shape {v.shape}, expected {p.shape}")
            self.velocities[i] = np.array(v, dtype=p.dtype)


@dataclass
class PlateauScheduler:
    """Multiply lr by ``factor`` once ``patience`` epochs pass without a new minimum."""

    lr: float
    patience: int = 10
    factor: float = 0.5
    best: float = float("inf")
    bad_epochs: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"plateau factor must lie in (0, 1), got {self.factor}")

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr

    def state(self):
        return {"lr": self.lr, "patience": self.patience, "factor": self.factor,
                "best": self.best, "bad_epochs": self.bad_epochs}


def plateau_schedule(history, lr, patience=10, factor=0.5):
    """Replay ``history`` of validation losses through the schedule; return the final lr."""
    if len(history) == 0:
        raise ConfigError("plateau_schedule needs a non-empty history")
    sched = PlateauScheduler(lr, patience, factor)
    for loss in history:
        sched.step(loss)
    return sched.lr
