"""Full networks: stem -> stacked ResFRI blocks -> global pool -> linear head."""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .block import FusionMode, GroupPlan, ResFRIBlock, ResFRIBlockConfig
from .errors import ConfigError
from .layers import ConvBNReLU, Linear, Module
from .tensor import DEFAULT_DTYPE, Tensor

CONFIG_VERSION = 1


@dataclass
class NetworkConfig:
    """Architecture description.

    ``downsample[i]`` inserts a 2x2 average pool (stride 2) before block ``i``.
    """

    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    stem: list = field(default_factory=lambda: [64])
    blocks: list = field(default_factory=list)
    downsample: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.stem = [int(v) for v in self.stem]
        self.blocks = [b if isinstance(b, ResFRIBlockConfig) else ResFRIBlockConfig.from_dict(b)
                       for b in self.blocks]
        if not self.downsample:
            self.downsample = [False] * len(self.blocks)
        self.downsample = [bool(v) for v in self.downsample]
        self.validate()

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if not self.blocks:
            raise ConfigError("a network needs at least one block")
        if len(self.downsample) != len(self.blocks):
            raise ConfigError(
                f"downsample has {len(self.downsample)} entries for {len(self.blocks)} blocks"
            )
        channels = self.stem[-1] if self.stem else self.input_shape[0]
        h, w = self.input_shape[1:]
        for i, (blk, down) in enumerate(zip(self.blocks, self.downsample)):
            if blk.in_channels != channels:
                raise ConfigError(
                    f"block {i}: expects {blk.in_channels} input channels but receives {channels}"
                )
            if down:
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ConfigError(f"block {i}: downsampling leaves no spatial extent")
            channels = blk.out_channels

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "stem": list(self.stem),
            "blocks": [b.to_dict() for b in self.blocks],
            "downsample": list(self.downsample),
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"input_shape", "num_classes", "stem", "blocks", "downsample"}
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed network config: {exc}") from None


def desk_config(fusion="addition", split=False, num_classes=10, input_shape=(3, 32, 32),
                **toggles):
    """Three stages of widths 64/128/256, one block each, halving resolution between."""
    widths = [64, 128, 256]
    blocks, cin = [], 64
    for wdt in widths:
        blocks.append(ResFRIBlockConfig(cin, GroupPlan.inception(wdt), FusionMode(fusion),
                                        split=split, **toggles))
        cin = wdt
    return NetworkConfig(input_shape=input_shape, num_classes=num_classes, stem=[64],
                         blocks=blocks, downsample=[False, True, True])


def mnist_config(fusion="addition", split=True, **toggles):
    """Small two-block network for 32x32 single-channel digits."""
    blocks = [
        ResFRIBlockConfig(16, GroupPlan.inception(32), FusionMode(fusion), split=split, **toggles),
        ResFRIBlockConfig(32, GroupPlan.inception(64), FusionMode(fusion), split=split, **toggles),
    ]
    return NetworkConfig(input_shape=(1, 32, 32), num_classes=10, stem=[16],
                         blocks=blocks, downsample=[True, True])


PRESETS = {"desk": desk_config, "mnist": mnist_config}


class Network(Module):
    def __init__(self, cfg, seed=0, dtype=DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = copy.deepcopy(cfg)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cin = cfg.input_shape[0]
        self.stem = []
        for wdt in cfg.stem:
            self.stem.append(ConvBNReLU(cin, wdt, 3, rng=rng, dtype=dtype))
            cin = wdt
        self.blocks = [ResFRIBlock(b, rng=rng, dtype=dtype) for b in cfg.blocks]
        self.head = Linear(cfg.blocks[-1].out_channels, cfg.num_classes, rng=rng, dtype=dtype)

    def features(self, x):
        for layer in self.stem:
            x = layer(x)
        for down, block in zip(self.cfg.downsample, self.blocks):
            if down:
                x = ops.avgpool2d(x, 2, 2, 0)
            x = block(x)
        return x

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        return self.head(ops.flatten(ops.global_avgpool(self.features(x))))

    def masked_layers(self):
        return [layer for block in self.blocks for layer in block.masked_layers()]

    def named_masks(self):
        names = {id(p): n for n, p in self.named_parameters()}
        return {names[id(layer.weight)]: layer.mask for layer in self.masked_layers()}


def build_network(cfg, seed=0, dtype=DEFAULT_DTYPE):
    return Network(cfg, seed=seed, dtype=dtype)


def count_params(net):
    """Trainable scalars; pruned weights still count since storage is unchanged."""
    return int(sum(p.size for p in net.parameters()))


def block_flops(net, input_shape=None):
    """Per-stage FLOPs as a list of (name, flops) in execution order."""
    c, h, w = input_shape if input_shape is not None else net.cfg.input_shape
    rows = []
    for i, layer in enumerate(net.stem):
        f, (h, w) = layer.flops(h, w)
        rows.append((f"stem.{i}", f))
    for i, (down, block) in enumerate(zip(net.cfg.downsample, net.blocks)):
        f = 0
        if down:
            h, w = ops.out_extent(h, 2, 2, 0), ops.out_extent(w, 2, 2, 0)
            f += block.in_channels * h * w
        rows.append((f"blocks.{i}", f + block.flops(h, w)))
    # global average pool (one op per output element) + linear head
    rows.append(("head", net.head.weight.shape[1] + net.head.flops()))
    return rows


def count_flops(net, input_shape=None):
    """conv: 2*O*I*kh*kw*Ho*Wo; linear: 2*in*out; pool/BN/ReLU: one per output element."""
    return int(sum(f for _, f in block_flops(net, input_shape)))


def block_params(net):
    rows = [(f"stem.{i}", count_params(m)) for i, m in enumerate(net.stem)]
    rows += [(f"blocks.{i}", count_params(b)) for i, b in enumerate(net.blocks)]
    rows.append(("head", count_params(net.head)))
    return rows
