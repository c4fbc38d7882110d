"""Epoch loop, evaluation metrics and CSV export."""

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentPolicy, batches
from .errors import ConfigError, NumericError
from .optim import SGD, PlateauScheduler
from .tensor import backward, no_grad

CSV_HEADER = ["epoch", "train_loss", "val_loss", "top1_err", "top5_err", "lr", "wall_seconds"]


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    max_epochs: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    eval_batch_size: int = 500
    # wall-clock column is written as 0.0 when off, making metrics.csv reproducible
    record_wall_time: bool = True

    def __post_init__(self):
        if self.lr0 <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr0 must be positive and momentum/weight_decay non-negative")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError(f"batch sizes must be >= 1, got {self.batch_size}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricRecord:
    epoch: int
    train_loss: float
    val_loss: float
    top1_err: float
    top5_err: float
    lr: float
    wall_seconds: float

    def row(self):
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in CSV_HEADER[1:]]


@dataclass
class Evaluation:
    loss: float
    acc: float
    top1_err: float
    top5_err: float
    n: int


def topk_correct(logits, labels, k):
    """Per-sample hit flags: label among the k largest logits (ties -> lower index)."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def metrics(logits, labels, top5=True):
    """Return ``(top1_err, top5_err, acc)``; err is defined as ``1 - acc``."""
    logits = np.asarray(getattr(logits, "data", logits))
    labels = np.asarray(labels)
    if top5 and logits.shape[1] < 5:
        raise ConfigError(f"top-5 error needs at least 5 classes, got {logits.shape[1]}")
    n = len(labels)
    acc = np.count_nonzero(logits.argmax(axis=1) == labels) / n
    top5_err = 1.0 - np.count_nonzero(topk_correct(logits, labels, 5)) / n if top5 else None
    return 1.0 - acc, top5_err, acc


def evaluate(net, ds, batch_size=500):
    """Loss and error rates over ``ds`` in eval mode; does not mutate ``net``."""
    was_training = net.training
    net.eval()
    total_loss = 0.0
    hit1 = hit5 = 0
    want5 = net.cfg.num_classes >= 5
    try:
        with no_grad():
            for x, y in batches(ds, batch_size, None, shuffle=False, dtype=net.dtype):
                logits = net(x)
                total_loss += float(ops.softmax_cross_entropy(logits, y).data) * len(y)
                hit1 += int(np.count_nonzero(logits.data.argmax(axis=1) == y))
                if want5:
                    hit5 += int(np.count_nonzero(topk_correct(logits.data, y, 5)))
    finally:
        net.train(was_training)
    n = len(ds)
    acc = hit1 / n
    return Evaluation(loss=total_loss / n, acc=acc, top1_err=1.0 - acc,
                      top5_err=1.0 - hit5 / n if want5 else float("nan"), n=n)


def write_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [MetricRecord(int(r["epoch"]), *(float(r[k]) for k in CSV_HEADER[1:])) for r in rows]


class Trainer:
    """Owns the mutable training state: network, optimizer, schedule, history."""

    def __init__(self, net, cfg, optimizer=None, scheduler=None, epoch=0, history=None,
                 policy=None, log=None):
        self.net = net
        self.cfg = cfg
        self.optimizer = optimizer or SGD(net, cfg.lr0, cfg.momentum, cfg.weight_decay)
        self.scheduler = scheduler or PlateauScheduler(cfg.lr0, cfg.plateau_patience,
                                                       cfg.plateau_factor)
        self.epoch = epoch
        self.history = list(history or [])
        self.policy = AugmentPolicy() if policy is None else policy
        self.log = log or (lambda msg: None)

    @classmethod
    def resume(cls, path, cfg, policy=None, log=None):
        net, optimizer, header = load_checkpoint(path)
        state = header["state"]
        sched = PlateauScheduler(**state["scheduler"])
        history = [MetricRecord(**r) for r in state.get("history", [])]
        if optimizer is None:
            optimizer = SGD(net, sched.lr, cfg.momentum, cfg.weight_decay)
        return cls(net, cfg, optimizer, sched, epoch=header["epoch"], history=history,
                   policy=policy, log=log)

    def state(self):
        return {
            "scheduler": self.scheduler.state(),
            "history": [asdict(r) for r in self.history],
            "rng": {"seed": self.cfg.seed, "next_epoch": self.epoch},
            "train_config": self.cfg.to_dict(),
        }

    def train_epoch(self, ds):
        net, opt = self.net, self.optimizer
        net.train()
        total, count = 0.0, 0
        for b, (x, y) in enumerate(batches(ds, self.cfg.batch_size, self.policy,
                                           seed=self.cfg.seed, epoch=self.epoch,
                                           dtype=net.dtype)):
            loss = ops.softmax_cross_entropy(net(x), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at epoch {self.epoch}, batch {b}, lr {opt.lr}"
                )
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += value * len(y)
            count += len(y)
        return total / count

    def fit(self, train_ds, val_ds, out_dir=None):
        """Run epochs ``self.epoch .. cfg.max_epochs - 1``; return the full history."""
        if val_ds is None or len(val_ds) == 0:
            raise ConfigError("training needs a non-empty validation split")
        csv_path = best_path = last_path = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            csv_path = os.path.join(out_dir, "metrics.csv")
            best_path = os.path.join(out_dir, "best.ckpt")
            last_path = os.path.join(out_dir, "last.ckpt")
            write_csv(csv_path, self.history)
            if self.epoch == 0:
                save_checkpoint(self.net, self.optimizer, last_path, self.epoch, self.state())
                if not self.history:
                    save_checkpoint(self.net, None, best_path, self.epoch, self.state())

        while self.epoch < self.cfg.max_epochs:
            start = time.perf_counter()
            lr = self.optimizer.lr
            train_loss = self.train_epoch(train_ds)
            ev = evaluate(self.net, val_ds, self.cfg.eval_batch_size)
            if not math.isfinite(ev.loss):
                raise NumericError(f"non-finite validation loss at epoch {self.epoch}, lr {lr}")
            improved = ev.loss < self.scheduler.best
            self.optimizer.lr = self.scheduler.step(ev.loss)
            wall = time.perf_counter() - start if self.cfg.record_wall_time else 0.0
            rec = MetricRecord(self.epoch, train_loss, ev.loss, ev.top1_err, ev.top5_err, lr, wall)
            self.history.append(rec)
            self.epoch += 1
            self.log(f"epoch {rec.epoch}: train_loss={train_loss:.4f} val_loss={ev.loss:.4f} "
                     f"top1_err={ev.top1_err:.4f} lr={lr:g}")
            if csv_path is not None:
                with open(csv_path, "a", newline="") as f:
                    csv.writer(f, lineterminator="\n").writerow(rec.row())
                    f.flush()
                save_checkpoint(self.net, self.optimizer, last_path, self.epoch, self.state())
                if improved:
                    save_checkpoint(self.net, None, best_path, self.epoch, self.state())
        return self.history


def train(net, train_ds, val_ds, cfg, out_dir=None, policy=None, log=None):
    return Trainer(net, cfg, policy=policy, log=log).fit(train_ds, val_ds, out_dir)
